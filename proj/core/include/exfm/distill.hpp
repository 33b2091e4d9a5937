#pragma once

// Training objectives for the vertical model and the per-iteration update
// procedures (plain BCE, vanilla KD, auxiliary head, auxiliary head plus
// student adapter).

#include <optional>
#include <span>
#include <string_view>

#include "exfm/models.hpp"

namespace exfm::distill {

using models::StudentAdapter;
using models::VmArch;
using models::VmGrads;

// LW, LS and GS knobs.
struct AHConfig {
  double loss_weight = 1.0;  // w
  double label_scale = 1.0;  // alpha, >= 1
  double grad_scale = 1.0;   // beta, >= 0

  void validate() const;
};

enum class DistillMode { kNoDistill, kVanillaKD, kAH, kAHPlusSA };

std::string_view to_string(DistillMode mode);
DistillMode parse_mode(std::string_view text);

struct TrainOptions {
  double lr = 0.05;
  double sa_lr = 0.05;
  // Adapter updates required before its output is used as a target.
  std::size_t sa_warmup = 100;
};

struct TrainStepReport {
  double loss_serving = 0.0;  // L_s (or the label term of L_kd)
  double loss_distill = 0.0;  // L_d, or the pseudo-label term of L_kd
  double loss_sa = 0.0;       // L_sa
  double loss_sta = 0.0;      // adapter's own loss
  double grad_norm_backbone = 0.0;
  double grad_norm_serving = 0.0;
  double grad_norm_ah = 0.0;
  double grad_norm_sa_head = 0.0;
  double grad_norm_adapter = 0.0;
  bool vm_updated = false;
  bool adapter_updated = false;
  bool sa_target_used = false;
};

// -[t log s(z) + (1-t) log(1-s(z))] in logit form.
double bce(double logit, double target);
// d bce / d logit.
double bce_grad(double logit, double target);

double loss_kd(double y_s_logit, double y_f, int y);

struct AhLoss {
  double serving = 0.0;
  double distill = 0.0;
  double total = 0.0;
};

// min(alpha * y_f, 1)
double scaled_target(double y_f, double label_scale);
AhLoss loss_ah(double y_s_logit, double y_d_logit, double y_f, int y, const AHConfig& cfg);

struct SaStepResult {
  double y_sa = 0.5;  // post-update adapter output; a constant to the caller
  double loss = 0.0;  // pre-update adapter loss
};

// One gradient step of the adapter on bce(adapter(y_f), y).
SaStepResult sa_train_step(StudentAdapter& sa, double y_f, int y, double lr);

struct TrainExample {
  std::span<const double> features;
  int label = 0;
  std::optional<double> y_f;
};

// Per-head decomposition of the objective at fixed targets. Terms routed to
// the serving head are kept apart from those on the distillation heads so
// that gradient scaling can be checked against finite differences:
// heads see d(serving + distill), the backbone sees d(serving + beta*distill).
struct ObjectiveTerms {
  double serving = 0.0;
  double distill = 0.0;
  double loss_s = 0.0;
  double loss_d = 0.0;
  double loss_sa = 0.0;
};

struct Targets {
  int label = 0;
  std::optional<double> y_f;
  std::optional<double> y_sa;  // stop-gradient adapter output, if in use
};

ObjectiveTerms objective_terms(const VmArch& vm, std::span<const double> features,
                               const Targets& targets, DistillMode mode,
                               const AHConfig& cfg);

struct GradientResult {
  VmGrads grads;
  ObjectiveTerms terms;
};

// Analytic gradient of objective_terms with grad_scale taken from cfg.
GradientResult vm_gradients(const VmArch& vm, std::span<const double> features,
                            const Targets& targets, DistillMode mode, const AHConfig& cfg);

// One training iteration. For kAHPlusSA this is: update the adapter, freeze
// its output, then step the vertical model on L_ah + L_sa. The vertical model
// step never touches the adapter. vm.grad_scale is set from cfg.
TrainStepReport vm_train_step(VmArch& vm, StudentAdapter& sa, const TrainExample& example,
                              DistillMode mode, const AHConfig& cfg,
                              const TrainOptions& opts);

// Same procedure with gradients averaged over a batch.
TrainStepReport vm_train_batch(VmArch& vm, StudentAdapter& sa,
                               std::span<const TrainExample> batch, DistillMode mode,
                               const AHConfig& cfg, const TrainOptions& opts);

}  // namespace exfm::distill
