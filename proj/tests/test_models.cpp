#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "exfm/error.hpp"
#include "exfm/models.hpp"

using namespace exfm;
using namespace exfm::models;
using numerics::DenseMatrix;
using numerics::DenseVector;
using numerics::SeededRng;

namespace {

VmArch zero_vm(const VmShape& shape) {
  SeededRng rng(1);
  VmArch vm = make_vm(shape, rng);
  vm.backbone = vm.backbone.zeros_like();
  vm.serving_head = vm.serving_head.zeros_like();
  vm.ah_head = vm.ah_head.zeros_like();
  vm.sa_head = vm.sa_head.zeros_like();
  return vm;
}

// Straight-line reference: explicit loops, no shared code with mlp_forward.
double reference_chain(const Mlp& mlp, std::vector<double> x) {
  for (const auto& layer : mlp.layers) {
    std::vector<double> y(layer.weight.rows());
    for (std::size_t r = 0; r < layer.weight.rows(); ++r) {
      double acc = layer.bias[r];
      for (std::size_t c = 0; c < layer.weight.cols(); ++c) acc += layer.weight(r, c) * x[c];
      y[r] = layer.activation == Activation::kRelu ? std::max(acc, 0.0) : acc;
    }
    x = std::move(y);
  }
  return x.at(0);
}

std::vector<double> reference_vector(const Mlp& mlp, std::vector<double> x) {
  for (const auto& layer : mlp.layers) {
    std::vector<double> y(layer.weight.rows());
    for (std::size_t r = 0; r < layer.weight.rows(); ++r) {
      double acc = layer.bias[r];
      for (std::size_t c = 0; c < layer.weight.cols(); ++c) acc += layer.weight(r, c) * x[c];
      y[r] = layer.activation == Activation::kRelu ? std::max(acc, 0.0) : acc;
    }
    x = std::move(y);
  }
  return x;
}

using Member = Mlp VmArch::*;
using GradMember = Mlp VmGrads::*;

// Central differences of f with respect to every parameter of one component.
std::vector<double> fd_component(VmArch vm, Member m,
                                 const std::function<double(const VmArch&)>& f, double h) {
  std::vector<double> p = flatten(vm.*m);
  std::vector<double> g(p.size());
  for (std::size_t j = 0; j < p.size(); ++j) {
    const double orig = p[j];
    p[j] = orig + h;
    unflatten(p, vm.*m);
    const double up = f(vm);
    p[j] = orig - h;
    unflatten(p, vm.*m);
    const double down = f(vm);
    p[j] = orig;
    unflatten(p, vm.*m);
    g[j] = (up - down) / (2 * h);
  }
  return g;
}

// Zero biases put relu units exactly on their kink, where central
// differences are meaningless. Move every parameter off it.
void jitter(VmArch& vm, SeededRng& rng) {
  for (Mlp* m : {&vm.backbone, &vm.serving_head, &vm.ah_head, &vm.sa_head}) {
    auto p = models::flatten(*m);
    for (double& v : p) v += 0.1 * rng.normal();
    models::unflatten(p, *m);
  }
}

}  // namespace

TEST(VmForward, ZeroArchGivesHalf) {
  const VmArch vm = zero_vm(VmShape{});
  const auto out = forward(vm, DenseVector(16, 3.0).span());
  EXPECT_EQ(out.y_s, 0.0);
  EXPECT_EQ(out.y_d, 0.0);
  EXPECT_EQ(out.y_sa_head, 0.0);
  EXPECT_EQ(numerics::sigmoid(out.y_s), 0.5);
}

TEST(VmForward, LinearComposition) {
  VmArch vm;
  const std::size_t n = 4;
  vm.backbone.layers.push_back({DenseMatrix::identity(n), DenseVector(n), Activation::kIdentity});
  DenseMatrix w(1, n);
  for (std::size_t i = 0; i < n; ++i) w(0, i) = double(i) - 1.5;
  vm.serving_head.layers.push_back({w, DenseVector(1), Activation::kIdentity});
  vm.ah_head = vm.serving_head;
  vm.sa_head = vm.serving_head;
  const DenseVector x{0.5, -1.0, 2.0, 0.25};
  const auto out = forward(vm, x.span());
  EXPECT_NEAR(out.y_s, numerics::dot(w.row(0), x.span()), 1e-15);
}

TEST(VmForward, MatchesReferenceChain) {
  SeededRng rng(5);
  const VmArch vm = make_vm(VmShape{}, rng);
  const DenseVector x = numerics::gaussian_vector(rng, 16);
  const auto out = forward(vm, x.span());
  const auto hidden = reference_vector(vm.backbone, x.values());
  EXPECT_NEAR(out.y_s, reference_chain(vm.serving_head, hidden), 1e-12);
  EXPECT_NEAR(out.y_d, reference_chain(vm.ah_head, hidden), 1e-12);
  EXPECT_NEAR(out.y_sa_head, reference_chain(vm.sa_head, hidden), 1e-12);
  // pure function
  EXPECT_EQ(forward(vm, x.span()).y_s, out.y_s);
}

TEST(VmForward, DimensionMismatch) {
  SeededRng rng(5);
  const VmArch vm = make_vm(VmShape{}, rng);
  try {
    forward(vm, DenseVector(15).span());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDimensionMismatch);
  }
}

TEST(VmBackward, ZeroSignalGivesZeroGradients) {
  SeededRng rng(6);
  const VmArch vm = make_vm(VmShape{}, rng, 2.0);
  const DenseVector x = numerics::gaussian_vector(rng, 16);
  const VmGrads g = backward(vm, forward(vm, x.span()), {0.0, 0.0, 0.0});
  EXPECT_EQ(squared_norm(g.backbone), 0.0);
  EXPECT_EQ(squared_norm(g.serving_head), 0.0);
  EXPECT_EQ(squared_norm(g.ah_head), 0.0);
  EXPECT_EQ(squared_norm(g.sa_head), 0.0);
}

TEST(VmBackward, ClosedGateLeavesServingOnly) {
  SeededRng rng(7);
  VmArch vm = make_vm(VmShape{}, rng, 0.0);
  const DenseVector x = numerics::gaussian_vector(rng, 16);
  const auto fwd = forward(vm, x.span());
  const VmGrads full = backward(vm, fwd, {0.3, -1.2, 0.8});
  const VmGrads serving = backward(vm, fwd, {0.3, 0.0, 0.0});
  EXPECT_EQ(flatten(full.backbone), flatten(serving.backbone));
  EXPECT_GT(squared_norm(full.ah_head), 0.0);
}

// Backbone: d(a y_s) + beta d(b y_d + c y_sa). Heads: unscaled.
TEST(VmBackward, MatchesFiniteDifferencesAcrossRandomArchs) {
  for (int trial = 0; trial < 20; ++trial) {
    SeededRng rng(100 + trial);
    VmShape shape;
    shape.input_dim = 3 + rng.below(6);
    shape.backbone_widths = {4 + rng.below(8), 3 + rng.below(6)};
    shape.head_hidden = {2 + rng.below(5)};
    const double beta = trial == 0 ? 2.5 : 3.0 * rng.uniform();
    VmArch vm = make_vm(shape, rng, beta);
    jitter(vm, rng);
    const DenseVector x = numerics::gaussian_vector(rng, shape.input_dim);
    const double a = rng.normal(), b = rng.normal(), c = rng.normal();
    const VmGrads g = backward(vm, forward(vm, x.span()), {a, b, c});

    auto serving = [&](const VmArch& v) { return a * forward(v, x.span()).y_s; };
    auto distill = [&](const VmArch& v) {
      const auto o = forward(v, x.span());
      return b * o.y_d + c * o.y_sa_head;
    };
    auto total = [&](const VmArch& v) { return serving(v) + distill(v); };
    const double h = 1e-6;

    const auto bs = fd_component(vm, &VmArch::backbone, serving, h);
    const auto bd = fd_component(vm, &VmArch::backbone, distill, h);
    std::vector<double> expect(bs.size());
    for (std::size_t j = 0; j < bs.size(); ++j) expect[j] = bs[j] + beta * bd[j];
    EXPECT_LE(numerics::max_relative_error(flatten(g.backbone), expect, 1e-6), 1e-5) << trial;
    for (auto [m, gm] : {std::pair<Member, GradMember>{&VmArch::serving_head, &VmGrads::serving_head},
                         {&VmArch::ah_head, &VmGrads::ah_head},
                         {&VmArch::sa_head, &VmGrads::sa_head}}) {
      EXPECT_LE(numerics::max_relative_error(flatten(g.*gm), fd_component(vm, m, total, h), 1e-6),
                1e-5)
          << trial;
    }
  }
}

TEST(VmBackward, GradScaleIsAffine) {
  SeededRng rng(9);
  VmArch vm = make_vm(VmShape{}, rng);
  const DenseVector x = numerics::gaussian_vector(rng, 16);
  const HeadLogitGrads d{0.4, -0.7, 0.9};
  auto backbone_at = [&](double beta) {
    vm.grad_scale = beta;
    return flatten(backward(vm, forward(vm, x.span()), d).backbone);
  };
  const auto g0 = backbone_at(0.0), g1 = backbone_at(1.0), g2 = backbone_at(2.0);
  for (std::size_t j = 0; j < g0.size(); ++j) EXPECT_NEAR(g2[j], 2 * g1[j] - g0[j], 1e-10);
}

TEST(SgdStep, Arithmetic) {
  Mlp p;
  p.layers.push_back({DenseMatrix(1, 1, 1.0), DenseVector(1), Activation::kIdentity});
  Mlp g = p.zeros_like();
  sgd_step(p, g, 0.1);
  EXPECT_EQ(p.layers[0].weight(0, 0), 1.0);
  g.layers[0].weight(0, 0) = 0.5;
  sgd_step(p, g, 0.1);
  EXPECT_DOUBLE_EQ(p.layers[0].weight(0, 0), 0.95);
}

// f(w) = (w - 3)^2 / 2 with lr 0.5: w_k = 3 (1 - 0.5^k).
TEST(SgdStep, QuadraticRecurrence) {
  Mlp p;
  p.layers.push_back({DenseMatrix(1, 1, 0.0), DenseVector(1), Activation::kIdentity});
  for (int k = 1; k <= 30; ++k) {
    Mlp g = p.zeros_like();
    g.layers[0].weight(0, 0) = p.layers[0].weight(0, 0) - 3.0;
    sgd_step(p, g, 0.5);
    EXPECT_NEAR(p.layers[0].weight(0, 0), 3.0 * (1.0 - std::pow(0.5, k)), 1e-12);
  }
}

TEST(Teacher, ZeroWeightsGiveHalf) {
  SeededRng rng(2);
  const std::vector<std::size_t> hidden{8};
  FmArch fm = make_fm(4, hidden, rng);
  fm.net = fm.net.zeros_like();
  EXPECT_EQ(fm_forward(fm, DenseVector{1, 2, 3, 4}.span()), 0.5);
}

TEST(Teacher, SingleLogisticUnit) {
  FmArch fm;
  DenseMatrix w(1, 3);
  w(0, 0) = 0.5;
  w(0, 1) = -1.0;
  w(0, 2) = 2.0;
  fm.net.layers.push_back({w, DenseVector(1), Activation::kIdentity});
  const DenseVector x{1.0, 0.5, 0.25};
  EXPECT_NEAR(fm_forward(fm, x.span()), numerics::sigmoid(0.5), 1e-15);
}

TEST(Teacher, SnapshotRoundTripIsBitExact) {
  SeededRng rng(3);
  const std::vector<std::size_t> hidden{32, 32};
  const FmArch fm = make_fm(16, hidden, rng);
  const std::string blob = encode_snapshot(42, fm.net);
  EXPECT_EQ(blob.rfind("EXFM-SNAP v1\n42\n", 0), 0u);
  const ModelSnapshot snap = decode_snapshot(blob);
  EXPECT_EQ(snap.version, 42u);
  EXPECT_EQ(snap.params, fm.net);
  const FmArch loaded{snap.params};
  for (int i = 0; i < 10; ++i) {
    const DenseVector x = numerics::gaussian_vector(rng, 16);
    EXPECT_EQ(fm_forward(loaded, x.span()), fm_forward(fm, x.span()));
  }
  std::stringstream ss;
  write_snapshot(ss, 42, fm.net);
  EXPECT_EQ(ss.str(), blob);
  EXPECT_EQ(read_snapshot(ss).params, fm.net);
}

TEST(Teacher, CorruptSnapshotIsRejected) {
  EXPECT_THROW(decode_snapshot("EXFM-SNAP v2\n1\n0\n"), Error);
  SeededRng rng(3);
  const std::vector<std::size_t> hidden{4};
  std::string blob = encode_snapshot(1, make_fm(2, hidden, rng).net);
  blob.resize(blob.size() - 3);
  EXPECT_THROW(decode_snapshot(blob), Error);
}

TEST(Teacher, CapacityRatio) {
  SeededRng rng(4);
  const VmArch vm = make_vm(VmShape{}, rng);
  const std::vector<std::size_t> wide{256, 256}, narrow{32};
  EXPECT_TRUE(has_capacity_ratio(make_fm(16, wide, rng), vm, 4.0));
  EXPECT_TRUE(has_capacity_ratio(make_fm(16, wide, rng), vm, 8.0));
  EXPECT_FALSE(has_capacity_ratio(make_fm(16, narrow, rng), vm, 4.0));
}

TEST(Teacher, TrainingLowersLoss) {
  SeededRng rng(8);
  const std::vector<std::size_t> hidden{16};
  FmArch fm = make_fm(2, hidden, rng);
  std::vector<DenseVector> xs;
  std::vector<int> ys;
  for (int i = 0; i < 64; ++i) {
    xs.push_back(numerics::gaussian_vector(rng, 2));
    ys.push_back(xs.back()[0] + xs.back()[1] > 0 ? 1 : 0);
  }
  std::vector<const DenseVector*> ptrs;
  for (const auto& x : xs) ptrs.push_back(&x);
  const double first = fm_train_batch(fm, ptrs, ys, 0.5);
  double last = first;
  for (int k = 0; k < 200; ++k) last = fm_train_batch(fm, ptrs, ys, 0.5);
  EXPECT_LT(last, 0.5 * first);
}

TEST(StudentAdapter, ScalarInput) {
  SeededRng rng(1);
  const StudentAdapter sa = make_student_adapter(8, rng);
  EXPECT_EQ(sa.net.input_dim(), 1u);
  EXPECT_EQ(sa.net.output_dim(), 1u);
  EXPECT_EQ(sa_logit(zero_student_adapter(8), 0.3), 0.0);
}
