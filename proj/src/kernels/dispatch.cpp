#include <atomic>
#include <cstdlib>
#include <iostream>
#include <string_view>

#include "dsbn/kernels.hpp"
#include "kernels/variants.hpp"

namespace dsbn::kernels {
namespace {

bool cpu_has_avx2_fma() {
#if defined(__x86_64__) && (defined(__GNUC__) || defined(__clang__))
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const KernelTable* detect() {
  const KernelTable* best = &scalar_table();
  if (const KernelTable* simd = avx2_table()) best = simd;

  if (const char* env = std::getenv("DSBN_KERNELS")) {
    const std::string_view want(env);
    if (want == "scalar") return &scalar_table();
    if (want == "avx2") {
      if (avx2_table() == nullptr)
        std::cerr << "warning: DSBN_KERNELS=avx2 requested but unavailable; "
                     "using " << best->name << "\n";
      return best;
    }
    if (!want.empty())
      std::cerr << "warning: unknown DSBN_KERNELS value '" << want
                << "'; using " << best->name << "\n";
  }
  return best;
}

std::atomic<const KernelTable*>& current() {
  static std::atomic<const KernelTable*> table{detect()};
  return table;
}

}  // namespace

const KernelTable* avx2_table() {
  static const KernelTable* table =
      cpu_has_avx2_fma() ? detail::compiled_avx2_table() : nullptr;
  return table;
}

const KernelTable& active() { return *current().load(std::memory_order_acquire); }

bool select(Isa isa) {
  const KernelTable* table = nullptr;
  switch (isa) {
    case Isa::kScalar: table = &scalar_table(); break;
    case Isa::kAvx2: table = avx2_table(); break;
  }
  if (table == nullptr) return false;
  current().store(table, std::memory_order_release);
  return true;
}

}  // namespace dsbn::kernels
