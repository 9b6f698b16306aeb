#include "dsbn/checkpoint.hpp"

#include <array>
#include <bit>
#include <fstream>
#include <sstream>

#include "dsbn/errors.hpp"

namespace dsbn {
namespace {

constexpr std::array<char, 8> kMagic{'D', 'S', 'B', 'N', 'C', 'K', 'P', 'T'};

enum class LayerTag : std::uint8_t { kLinear = 1, kRelu = 2, kBatchNorm = 3, kDsbn = 4 };

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}

  void u8(std::uint8_t v) { out_.put(static_cast<char>(v)); }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.put(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.put(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u64(s.size());
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void doubles(std::span<const double> v) {
    u64(v.size());
    for (double x : v) f64(x);
  }
  void parameter(const Parameter& p) {
    u8(p.trainable ? 1 : 0);
    const auto& shape = p.tensor.shape();
    u64(shape.size());
    for (auto d : shape) u64(d);
    doubles(p.tensor.values());
  }
  void bn(const BnState& s) {
    f64(s.eps);
    f64(s.momentum);
    parameter(s.gamma);
    parameter(s.beta);
    doubles(s.running_mean);
    doubles(s.running_var);
  }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  std::uint8_t u8() {
    const int c = in_.get();
    if (c == std::char_traits<char>::eof()) throw FormatError("checkpoint truncated");
    return static_cast<std::uint8_t>(c);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::uint64_t count(std::uint64_t limit = std::uint64_t{1} << 32) {
    const auto n = u64();
    if (n > limit) throw FormatError("checkpoint length field out of range");
    return n;
  }
  std::string str() {
    std::string s(count(), '\0');
    in_.read(s.data(), static_cast<std::streamsize>(s.size()));
    if (!in_) throw FormatError("checkpoint truncated");
    return s;
  }
  std::vector<double> doubles() {
    std::vector<double> v(count());
    for (auto& x : v) x = f64();
    return v;
  }
  Parameter parameter() {
    Parameter p;
    p.trainable = u8() != 0;
    Shape shape(count(8));
    for (auto& d : shape) d = count();
    auto values = doubles();
    if (values.size() != shape_size(shape))
      throw FormatError("parameter of shape " + shape_to_string(shape) + " holds " +
                        std::to_string(values.size()) + " values");
    p.tensor = Tensor::parameter(std::move(shape), std::move(values));
    return p;
  }
  BnState bn() {
    BnState s;
    s.eps = f64();
    s.momentum = f64();
    s.gamma = parameter();
    s.beta = parameter();
    s.running_mean = doubles();
    s.running_var = doubles();
    try {
      s.validate();
    } catch (const ConfigError& e) {
      throw FormatError(std::string("corrupt normalization state: ") + e.what());
    }
    return s;
  }

 private:
  std::istream& in_;
};

void write_network(Writer& w, const Network& net) {
  w.u64(net.feature_layer());
  w.u64(net.layers().size());
  for (const auto& layer : net.layers()) {
    if (const auto* lin = std::get_if<Linear>(&layer)) {
      w.u8(static_cast<std::uint8_t>(LayerTag::kLinear));
      w.parameter(lin->weight);
      w.parameter(lin->bias);
    } else if (std::holds_alternative<Relu>(layer)) {
      w.u8(static_cast<std::uint8_t>(LayerTag::kRelu));
    } else if (const auto* bn = std::get_if<BatchNorm>(&layer)) {
      w.u8(static_cast<std::uint8_t>(LayerTag::kBatchNorm));
      w.bn(bn->state);
    } else {
      const auto& ds = std::get<DomainBatchNorm>(layer).layer;
      w.u8(static_cast<std::uint8_t>(LayerTag::kDsbn));
      w.u64(ds.channel_count());
      w.u64(ds.branch_count());
      for (const auto& [domain, state] : ds.branches()) {
        w.u32(domain.index);
        w.u8(domain.is_target() ? 1 : 0);
        w.bn(state);
      }
    }
  }
}

Network read_network(Reader& r) {
  const auto feature_layer = r.count();
  std::vector<Layer> layers(r.count());
  for (auto& layer : layers) {
    switch (static_cast<LayerTag>(r.u8())) {
      case LayerTag::kLinear: {
        Linear lin;
        lin.weight = r.parameter();
        lin.bias = r.parameter();
        layer = std::move(lin);
        break;
      }
      case LayerTag::kRelu:
        layer = Relu{};
        break;
      case LayerTag::kBatchNorm:
        layer = BatchNorm{r.bn()};
        break;
      case LayerTag::kDsbn: {
        DsbnLayer ds(r.count());
        const auto branches = r.count();
        for (std::uint64_t b = 0; b < branches; ++b) {
          const auto index = r.u32();
          const auto role = r.u8() != 0 ? DomainRole::kTarget : DomainRole::kSource;
          ds.add_domain_branch(DomainId{index, role}, r.bn());
        }
        layer = DomainBatchNorm{std::move(ds)};
        break;
      }
      default:
        throw FormatError("unknown layer tag in checkpoint");
    }
  }
  try {
    return Network(std::move(layers), feature_layer);
  } catch (const Error& e) {
    throw FormatError(std::string("inconsistent network in checkpoint: ") + e.what());
  }
}

}  // namespace

void save_checkpoint(std::ostream& out, const Checkpoint& ckpt) {
  Writer w(out);
  out.write(kMagic.data(), kMagic.size());
  w.u32(kCheckpointVersion);
  w.str(ckpt.tag);
  write_network(w, ckpt.model);

  const auto& opt = ckpt.optimizer;
  w.f64(opt.beta1);
  w.f64(opt.beta2);
  w.f64(opt.eps);
  w.u64(static_cast<std::uint64_t>(opt.step));
  w.u64(opt.first_moment.size());
  for (std::size_t i = 0; i < opt.first_moment.size(); ++i) {
    w.doubles(opt.first_moment[i]);
    w.doubles(opt.second_moment.at(i));
  }

  std::ostringstream rng;
  rng << ckpt.rng;
  w.str(rng.str());
  if (!out) throw FormatError("failed writing checkpoint");
}

Checkpoint load_checkpoint(std::istream& in) {
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw FormatError("not a checkpoint file");
  Reader r(in);
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));

  Checkpoint ckpt;
  ckpt.tag = r.str();
  ckpt.model = read_network(r);

  auto& opt = ckpt.optimizer;
  opt.beta1 = r.f64();
  opt.beta2 = r.f64();
  opt.eps = r.f64();
  opt.step = static_cast<std::int64_t>(r.u64());
  const auto n = r.count();
  for (std::uint64_t i = 0; i < n; ++i) {
    opt.first_moment.push_back(r.doubles());
    opt.second_moment.push_back(r.doubles());
  }

  std::istringstream rng(r.str());
  rng >> ckpt.rng;
  if (!rng) throw FormatError("corrupt RNG state in checkpoint");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  save_checkpoint(out, ckpt);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return load_checkpoint(in);
}

}  // namespace dsbn
