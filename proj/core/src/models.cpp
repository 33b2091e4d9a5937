#include "exfm/models.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "exfm/error.hpp"

namespace exfm::models {

using numerics::axpy;
using numerics::dot;

std::size_t Mlp::input_dim() const {
  return layers.empty() ? 0 : layers.front().weight.cols();
}

std::size_t Mlp::output_dim() const {
  return layers.empty() ? 0 : layers.back().weight.rows();
}

std::size_t Mlp::parameter_count() const {
  std::size_t n = 0;
  for (const auto& layer : layers) n += layer.weight.span().size() + layer.bias.dim();
  return n;
}

Mlp Mlp::zeros_like() const {
  Mlp out;
  out.layers.reserve(layers.size());
  for (const auto& layer : layers) {
    out.layers.push_back({DenseMatrix(layer.weight.rows(), layer.weight.cols()),
                          DenseVector(layer.bias.dim()), layer.activation});
  }
  return out;
}

Mlp make_mlp(std::span<const std::size_t> widths, SeededRng& rng) {
  if (widths.size() < 2) {
    throw Error(ErrorCode::kInvalidArgument, "make_mlp: need at least input and output widths");
  }
  Mlp mlp;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const std::size_t in = widths[i];
    const std::size_t out = widths[i + 1];
    const bool last = i + 2 == widths.size();
    Layer layer{numerics::gaussian_matrix(rng, out, in, 1.0 / std::sqrt(double(in))),
                DenseVector(out), last ? Activation::kIdentity : Activation::kRelu};
    mlp.layers.push_back(std::move(layer));
  }
  return mlp;
}

DenseVector mlp_forward(const Mlp& mlp, std::span<const double> input, MlpCache* cache) {
  if (input.size() != mlp.input_dim()) {
    throw Error(ErrorCode::kDimensionMismatch,
                "mlp_forward: expected input of size " + std::to_string(mlp.input_dim()) +
                    ", got " + std::to_string(input.size()));
  }
  if (cache) {
    cache->inputs.resize(mlp.layers.size());
    cache->pre.resize(mlp.layers.size());
  }
  DenseVector current(std::vector<double>(input.begin(), input.end()));
  for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
    const Layer& layer = mlp.layers[l];
    DenseVector pre(layer.weight.rows());
    for (std::size_t r = 0; r < pre.dim(); ++r) {
      pre[r] = dot(layer.weight.row(r), current.span()) + layer.bias[r];
    }
    DenseVector post = pre;
    if (layer.activation == Activation::kRelu) {
      for (auto& v : post) v = v > 0.0 ? v : 0.0;
    }
    if (cache) {
      cache->inputs[l] = std::move(current);
      cache->pre[l] = std::move(pre);
    }
    current = std::move(post);
  }
  return current;
}

DenseVector mlp_backward(const Mlp& mlp, const MlpCache& cache,
                         std::span<const double> d_output, MlpGrads& grads) {
  DenseVector delta(std::vector<double>(d_output.begin(), d_output.end()));
  for (std::size_t l = mlp.layers.size(); l-- > 0;) {
    const Layer& layer = mlp.layers[l];
    Layer& g = grads.layers[l];
    if (layer.activation == Activation::kRelu) {
      const DenseVector& pre = cache.pre[l];
      for (std::size_t i = 0; i < delta.dim(); ++i) {
        if (!(pre[i] > 0.0)) delta[i] = 0.0;
      }
    }
    const DenseVector& in = cache.inputs[l];
    DenseVector d_in(in.dim());
    for (std::size_t r = 0; r < delta.dim(); ++r) {
      const double dr = delta[r];
      if (dr == 0.0) continue;
      axpy(dr, in.span(), g.weight.row(r));
      g.bias[r] += dr;
      axpy(dr, layer.weight.row(r), d_in.span());
    }
    delta = std::move(d_in);
  }
  return delta;
}

void sgd_step(Mlp& params, const MlpGrads& grads, double lr) {
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    axpy(-lr, grads.layers[l].weight.span(), params.layers[l].weight.span());
    axpy(-lr, grads.layers[l].bias.span(), params.layers[l].bias.span());
  }
}

void scale_in_place(Mlp& grads, double factor) {
  for (auto& layer : grads.layers) {
    for (auto& v : layer.weight.span()) v *= factor;
    for (auto& v : layer.bias) v *= factor;
  }
}

double squared_norm(const Mlp& grads) {
  double s = 0.0;
  for (const auto& layer : grads.layers) {
    s += dot(layer.weight.span(), layer.weight.span());
    s += dot(layer.bias.span(), layer.bias.span());
  }
  return s;
}

std::vector<double> flatten(const Mlp& mlp) {
  std::vector<double> out;
  out.reserve(mlp.parameter_count());
  for (const auto& layer : mlp.layers) {
    out.insert(out.end(), layer.weight.span().begin(), layer.weight.span().end());
    out.insert(out.end(), layer.bias.begin(), layer.bias.end());
  }
  return out;
}

void unflatten(std::span<const double> values, Mlp& mlp) {
  if (values.size() != mlp.parameter_count()) {
    throw Error(ErrorCode::kDimensionMismatch, "unflatten: parameter count differs");
  }
  std::size_t k = 0;
  for (auto& layer : mlp.layers) {
    for (auto& v : layer.weight.span()) v = values[k++];
    for (auto& v : layer.bias) v = values[k++];
  }
}

std::size_t VmArch::parameter_count() const {
  return backbone.parameter_count() + serving_head.parameter_count() +
         ah_head.parameter_count() + sa_head.parameter_count();
}

VmGrads VmGrads::zeros_like(const VmArch& arch) {
  return {arch.backbone.zeros_like(), arch.serving_head.zeros_like(),
          arch.ah_head.zeros_like(), arch.sa_head.zeros_like()};
}

namespace {

void add_mlp(Mlp& into, const Mlp& from) {
  for (std::size_t l = 0; l < into.layers.size(); ++l) {
    axpy(1.0, from.layers[l].weight.span(), into.layers[l].weight.span());
    axpy(1.0, from.layers[l].bias.span(), into.layers[l].bias.span());
  }
}

std::vector<std::size_t> chain(std::size_t in, const std::vector<std::size_t>& hidden,
                               std::size_t out) {
  std::vector<std::size_t> widths{in};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(out);
  return widths;
}

}  // namespace

void VmGrads::add(const VmGrads& other) {
  add_mlp(backbone, other.backbone);
  add_mlp(serving_head, other.serving_head);
  add_mlp(ah_head, other.ah_head);
  add_mlp(sa_head, other.sa_head);
}

void VmGrads::scale(double factor) {
  scale_in_place(backbone, factor);
  scale_in_place(serving_head, factor);
  scale_in_place(ah_head, factor);
  scale_in_place(sa_head, factor);
}

VmArch make_vm(const VmShape& shape, SeededRng& rng, double grad_scale) {
  if (shape.backbone_widths.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "make_vm: backbone needs at least one layer");
  }
  if (grad_scale < 0.0) {
    throw Error(ErrorCode::kInvalidArgument, "make_vm: grad_scale must be >= 0");
  }
  VmArch arch;
  std::vector<std::size_t> backbone{shape.input_dim};
  backbone.insert(backbone.end(), shape.backbone_widths.begin(), shape.backbone_widths.end());
  arch.backbone = make_mlp(backbone, rng);
  // The backbone output feeds the heads; keep its last layer relu so the
  // representation is the usual post-activation embedding.
  arch.backbone.layers.back().activation = Activation::kRelu;
  const std::size_t b = shape.backbone_widths.back();
  const auto head = chain(b, shape.head_hidden, 1);
  arch.serving_head = make_mlp(head, rng);
  arch.ah_head = make_mlp(head, rng);
  arch.sa_head = make_mlp(head, rng);
  arch.grad_scale = grad_scale;
  return arch;
}

VmForwardOutput forward(const VmArch& arch, std::span<const double> features) {
  VmForwardOutput out;
  out.x = mlp_forward(arch.backbone, features, &out.backbone_cache);
  out.y_s = mlp_forward(arch.serving_head, out.x.span(), &out.serving_cache)[0];
  out.y_d = mlp_forward(arch.ah_head, out.x.span(), &out.ah_cache)[0];
  out.y_sa_head = mlp_forward(arch.sa_head, out.x.span(), &out.sa_cache)[0];
  return out;
}

VmGrads backward(const VmArch& arch, const VmForwardOutput& fwd,
                 const HeadLogitGrads& d_logits) {
  VmGrads grads = VmGrads::zeros_like(arch);
  const double ds[1] = {d_logits.serving};
  const double dd[1] = {d_logits.ah};
  const double dsa[1] = {d_logits.sa};
  DenseVector dx = mlp_backward(arch.serving_head, fwd.serving_cache, ds, grads.serving_head);
  const DenseVector dx_ah = mlp_backward(arch.ah_head, fwd.ah_cache, dd, grads.ah_head);
  const DenseVector dx_sa = mlp_backward(arch.sa_head, fwd.sa_cache, dsa, grads.sa_head);
  // Gradient scaling happens only at the head/backbone boundary.
  axpy(arch.grad_scale, dx_ah.span(), dx.span());
  axpy(arch.grad_scale, dx_sa.span(), dx.span());
  mlp_backward(arch.backbone, fwd.backbone_cache, dx.span(), grads.backbone);
  return grads;
}

void sgd_step(VmArch& params, const VmGrads& grads, double lr) {
  sgd_step(params.backbone, grads.backbone, lr);
  sgd_step(params.serving_head, grads.serving_head, lr);
  sgd_step(params.ah_head, grads.ah_head, lr);
  sgd_step(params.sa_head, grads.sa_head, lr);
}

FmArch make_fm(std::size_t input_dim, std::span<const std::size_t> hidden, SeededRng& rng) {
  std::vector<std::size_t> widths{input_dim};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(1);
  return FmArch{make_mlp(widths, rng)};
}

double fm_logit(const FmArch& fm, std::span<const double> features) {
  return mlp_forward(fm.net, features)[0];
}

double fm_forward(const FmArch& fm, std::span<const double> features) {
  return numerics::sigmoid(fm_logit(fm, features));
}

double fm_train_batch(FmArch& fm, std::span<const DenseVector* const> features,
                      std::span<const int> labels, double lr) {
  if (features.size() != labels.size()) {
    throw Error(ErrorCode::kDimensionMismatch, "fm_train_batch: features and labels differ");
  }
  if (features.empty()) return 0.0;
  MlpGrads grads = fm.net.zeros_like();
  MlpCache cache;
  double loss = 0.0;
  for (std::size_t i = 0; i < features.size(); ++i) {
    const double z = mlp_forward(fm.net, features[i]->span(), &cache)[0];
    const double y = labels[i];
    loss += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    const double dz[1] = {numerics::sigmoid(z) - y};
    mlp_backward(fm.net, cache, dz, grads);
  }
  const double inv = 1.0 / double(features.size());
  sgd_step(fm.net, grads, lr * inv);
  return loss * inv;
}

bool has_capacity_ratio(const FmArch& fm, const VmArch& vm, double ratio) {
  return double(fm.parameter_count()) >= ratio * double(vm.parameter_count());
}

StudentAdapter make_student_adapter(std::size_t hidden, SeededRng& rng) {
  const std::array<std::size_t, 3> widths{1, hidden, 1};
  return StudentAdapter{make_mlp(widths, rng), 0};
}

StudentAdapter zero_student_adapter(std::size_t hidden) {
  SeededRng rng(0);
  StudentAdapter sa = make_student_adapter(hidden, rng);
  sa.net = sa.net.zeros_like();
  return sa;
}

double sa_logit(const StudentAdapter& sa, double y_f, MlpCache* cache) {
  const double in[1] = {y_f};
  return mlp_forward(sa.net, in, cache)[0];
}

namespace {

constexpr const char* kSnapshotMagic = "EXFM-SNAP v1";

void put_le64(std::ostream& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
  out.write(bytes, 8);
}

double get_le64(std::istream& in) {
  unsigned char bytes[8];
  if (!in.read(reinterpret_cast<char*>(bytes), 8)) {
    throw Error(ErrorCode::kFormatError, "snapshot truncated");
  }
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= std::uint64_t{bytes[i]} << (8 * i);
  return std::bit_cast<double>(bits);
}

std::string read_line(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::kFormatError, "snapshot header truncated");
  return line;
}

}  // namespace

void write_snapshot(std::ostream& out, std::uint64_t version, const Mlp& params) {
  out << kSnapshotMagic << '\n' << version << '\n' << params.layers.size() << '\n';
  for (const auto& layer : params.layers) {
    out << layer.weight.rows() << ' ' << layer.weight.cols() << ' '
        << (layer.activation == Activation::kRelu ? "relu" : "identity") << '\n';
  }
  for (const auto& layer : params.layers) {
    for (double v : layer.weight.span()) put_le64(out, v);
    for (double v : layer.bias) put_le64(out, v);
  }
  if (!out) throw Error(ErrorCode::kIoError, "failed to write snapshot");
}

ModelSnapshot read_snapshot(std::istream& in) {
  if (read_line(in) != kSnapshotMagic) {
    throw Error(ErrorCode::kFormatError, "bad snapshot magic");
  }
  ModelSnapshot snap;
  try {
    snap.version = std::stoull(read_line(in));
    const std::size_t n_layers = std::stoull(read_line(in));
    for (std::size_t l = 0; l < n_layers; ++l) {
      std::istringstream shape(read_line(in));
      std::size_t rows = 0, cols = 0;
      std::string act;
      if (!(shape >> rows >> cols >> act) || (act != "relu" && act != "identity")) {
        throw Error(ErrorCode::kFormatError, "bad layer shape line");
      }
      snap.params.layers.push_back({DenseMatrix(rows, cols), DenseVector(rows),
                                    act == "relu" ? Activation::kRelu : Activation::kIdentity});
    }
  } catch (const std::logic_error&) {
    throw Error(ErrorCode::kFormatError, "bad snapshot header number");
  }
  for (auto& layer : snap.params.layers) {
    for (auto& v : layer.weight.span()) v = get_le64(in);
    for (auto& v : layer.bias) v = get_le64(in);
  }
  return snap;
}

std::string encode_snapshot(std::uint64_t version, const Mlp& params) {
  std::ostringstream out(std::ios::binary);
  write_snapshot(out, version, params);
  return std::move(out).str();
}

ModelSnapshot decode_snapshot(const std::string& bytes) {
  std::istringstream in(bytes, std::ios::binary);
  return read_snapshot(in);
}

}  // namespace exfm::models
