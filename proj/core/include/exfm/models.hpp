#pragma once

// Desk-scale architectures with hand-written forward/backward passes:
// vertical model (backbone + serving / auxiliary / adapter-target heads),
// the foundation-model teacher, and the student adapter.

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "exfm/numerics.hpp"

namespace exfm::models {

using numerics::DenseMatrix;
using numerics::DenseVector;
using numerics::SeededRng;

enum class Activation : std::uint8_t { kIdentity = 0, kRelu = 1 };

struct Layer {
  DenseMatrix weight;  // out x in
  DenseVector bias;    // out
  Activation activation = Activation::kIdentity;

  bool operator==(const Layer&) const = default;
};

struct Mlp {
  std::vector<Layer> layers;

  std::size_t input_dim() const;
  std::size_t output_dim() const;
  std::size_t parameter_count() const;
  // Same shapes, all parameters zero. Used as a gradient accumulator.
  Mlp zeros_like() const;

  bool operator==(const Mlp&) const = default;
};

using MlpGrads = Mlp;

struct MlpCache {
  std::vector<DenseVector> inputs;  // input to each layer
  std::vector<DenseVector> pre;     // pre-activation of each layer
};

// widths = {in, hidden..., out}. Hidden layers use relu, the last layer is
// linear. Weights ~ N(0, 1/fan_in), biases zero.
Mlp make_mlp(std::span<const std::size_t> widths, SeededRng& rng);

DenseVector mlp_forward(const Mlp& mlp, std::span<const double> input,
                        MlpCache* cache = nullptr);
// Accumulates parameter gradients into `grads` and returns d(loss)/d(input).
DenseVector mlp_backward(const Mlp& mlp, const MlpCache& cache,
                         std::span<const double> d_output, MlpGrads& grads);

void sgd_step(Mlp& params, const MlpGrads& grads, double lr);
void scale_in_place(Mlp& grads, double factor);
double squared_norm(const Mlp& grads);
// Flattened view of every parameter in layer order (weights then bias).
std::vector<double> flatten(const Mlp& mlp);
void unflatten(std::span<const double> values, Mlp& mlp);

struct VmShape {
  std::size_t input_dim = 16;
  std::vector<std::size_t> backbone_widths{64, 64};
  std::vector<std::size_t> head_hidden{16};
};

// Vertical (student) model. grad_scale is the GS multiplier applied to the
// signal that the ah/sa heads send back into the backbone.
struct VmArch {
  Mlp backbone;
  Mlp serving_head;
  Mlp ah_head;
  Mlp sa_head;
  double grad_scale = 1.0;

  std::size_t input_dim() const { return backbone.input_dim(); }
  std::size_t parameter_count() const;
  bool operator==(const VmArch&) const = default;
};

struct VmGrads {
  MlpGrads backbone;
  MlpGrads serving_head;
  MlpGrads ah_head;
  MlpGrads sa_head;

  static VmGrads zeros_like(const VmArch& arch);
  void add(const VmGrads& other);
  void scale(double factor);
};

struct VmForwardOutput {
  DenseVector x;  // backbone output
  double y_s = 0.0;
  double y_d = 0.0;
  double y_sa_head = 0.0;
  MlpCache backbone_cache;
  MlpCache serving_cache;
  MlpCache ah_cache;
  MlpCache sa_cache;
};

// d(loss)/d(logit) for each head.
struct HeadLogitGrads {
  double serving = 0.0;
  double ah = 0.0;
  double sa = 0.0;
};

VmArch make_vm(const VmShape& shape, SeededRng& rng, double grad_scale = 1.0);
VmForwardOutput forward(const VmArch& arch, std::span<const double> features);
VmGrads backward(const VmArch& arch, const VmForwardOutput& fwd,
                 const HeadLogitGrads& d_logits);
void sgd_step(VmArch& params, const VmGrads& grads, double lr);

struct FmArch {
  Mlp net;
  std::size_t parameter_count() const { return net.parameter_count(); }
};

// Teacher MLP: input -> widths... -> 1 logit.
FmArch make_fm(std::size_t input_dim, std::span<const std::size_t> hidden,
               SeededRng& rng);
double fm_logit(const FmArch& fm, std::span<const double> features);
double fm_forward(const FmArch& fm, std::span<const double> features);
// One BCE gradient step on a batch; returns mean loss before the step.
double fm_train_batch(FmArch& fm, std::span<const DenseVector* const> features,
                      std::span<const int> labels, double lr);

// Capacity check used when wiring a teacher to its students.
bool has_capacity_ratio(const FmArch& fm, const VmArch& vm, double ratio);

// Scalar-in, scalar-out network mapping a pseudo-label to a logit.
struct StudentAdapter {
  Mlp net;
  std::uint64_t updates = 0;

  bool operator==(const StudentAdapter&) const = default;
};

StudentAdapter make_student_adapter(std::size_t hidden, SeededRng& rng);
StudentAdapter zero_student_adapter(std::size_t hidden);
double sa_logit(const StudentAdapter& sa, double y_f, MlpCache* cache = nullptr);

// Snapshot blob:
//   "EXFM-SNAP v1\n"
//   "<version>\n"
//   "<layer count>\n"
//   one "<rows> <cols> <relu|identity>\n" line per layer
//   then, per layer, weight (row-major) followed by bias as little-endian
//   IEEE-754 binary64.
struct ModelSnapshot {
  std::uint64_t version = 0;
  Mlp params;
};

void write_snapshot(std::ostream& out, std::uint64_t version, const Mlp& params);
ModelSnapshot read_snapshot(std::istream& in);
std::string encode_snapshot(std::uint64_t version, const Mlp& params);
ModelSnapshot decode_snapshot(const std::string& bytes);

}  // namespace exfm::models
