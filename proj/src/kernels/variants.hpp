#pragma once

#include "dsbn/kernels.hpp"

namespace dsbn::kernels::detail {

// Table from the AVX2/FMA translation unit, or nullptr on targets where it is
// not built. Does not check the running CPU.
const KernelTable* compiled_avx2_table();

}  // namespace dsbn::kernels::detail
