#include "exfm/distill.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "exfm/error.hpp"

namespace exfm::distill {

using numerics::sigmoid;

void AHConfig::validate() const {
  if (!(loss_weight >= 0.0)) throw Error(ErrorCode::kInvalidArgument, "loss weight must be >= 0");
  if (!(label_scale >= 1.0)) throw Error(ErrorCode::kInvalidArgument, "label scale must be >= 1");
  if (!(grad_scale >= 0.0)) throw Error(ErrorCode::kInvalidArgument, "grad scale must be >= 0");
}

std::string_view to_string(DistillMode mode) {
  switch (mode) {
    case DistillMode::kNoDistill:
      return "NoDistill";
    case DistillMode::kVanillaKD:
      return "VanillaKD";
    case DistillMode::kAH:
      return "AH";
    case DistillMode::kAHPlusSA:
      return "AH_plus_SA";
  }
  return "?";
}

DistillMode parse_mode(std::string_view text) {
  for (auto mode : {DistillMode::kNoDistill, DistillMode::kVanillaKD, DistillMode::kAH,
                    DistillMode::kAHPlusSA}) {
    if (text == to_string(mode)) return mode;
  }
  throw Error(ErrorCode::kConfigError, "unknown distill mode '" + std::string(text) + "'");
}

double bce(double logit, double target) {
  return std::max(logit, 0.0) - logit * target + std::log1p(std::exp(-std::abs(logit)));
}

double bce_grad(double logit, double target) { return sigmoid(logit) - target; }

double loss_kd(double y_s_logit, double y_f, int y) {
  return bce(y_s_logit, y) + bce(y_s_logit, y_f);
}

double scaled_target(double y_f, double label_scale) {
  return std::clamp(label_scale * y_f, 0.0, 1.0);
}

AhLoss loss_ah(double y_s_logit, double y_d_logit, double y_f, int y, const AHConfig& cfg) {
  AhLoss out;
  out.serving = bce(y_s_logit, y);
  out.distill = bce(y_d_logit, scaled_target(y_f, cfg.label_scale));
  out.total = out.serving + cfg.loss_weight * out.distill;
  return out;
}

SaStepResult sa_train_step(StudentAdapter& sa, double y_f, int y, double lr) {
  models::MlpCache cache;
  const double z = models::sa_logit(sa, y_f, &cache);
  SaStepResult result;
  result.loss = bce(z, y);
  if (lr > 0.0) {
    models::MlpGrads grads = sa.net.zeros_like();
    const double dz[1] = {bce_grad(z, y)};
    models::mlp_backward(sa.net, cache, dz, grads);
    models::sgd_step(sa.net, grads, lr);
  }
  ++sa.updates;
  result.y_sa = sigmoid(models::sa_logit(sa, y_f));
  return result;
}

namespace {

void require_supervision(const Targets& targets, DistillMode mode) {
  if (mode != DistillMode::kNoDistill && !targets.y_f) {
    throw Error(ErrorCode::kMissingSupervision,
                std::string("mode ") + std::string(to_string(mode)) +
                    " needs a pseudo-label");
  }
}

struct LogitGrads {
  models::HeadLogitGrads heads;
  ObjectiveTerms terms;
};

LogitGrads logit_grads(const models::VmForwardOutput& fwd, const Targets& t,
                       DistillMode mode, const AHConfig& cfg) {
  require_supervision(t, mode);
  LogitGrads out;
  const double y = t.label;
  out.terms.loss_s = bce(fwd.y_s, y);
  out.terms.serving = out.terms.loss_s;
  out.heads.serving = bce_grad(fwd.y_s, y);
  switch (mode) {
    case DistillMode::kNoDistill:
      break;
    case DistillMode::kVanillaKD:
      // Both labels land on the serving head.
      out.terms.loss_d = bce(fwd.y_s, *t.y_f);
      out.terms.serving += out.terms.loss_d;
      out.heads.serving += bce_grad(fwd.y_s, *t.y_f);
      break;
    case DistillMode::kAH:
    case DistillMode::kAHPlusSA: {
      const double target = scaled_target(*t.y_f, cfg.label_scale);
      out.terms.loss_d = bce(fwd.y_d, target);
      out.terms.distill = cfg.loss_weight * out.terms.loss_d;
      out.heads.ah = cfg.loss_weight * bce_grad(fwd.y_d, target);
      if (mode == DistillMode::kAHPlusSA && t.y_sa) {
        out.terms.loss_sa = bce(fwd.y_sa_head, *t.y_sa);
        out.terms.distill += out.terms.loss_sa;
        out.heads.sa = bce_grad(fwd.y_sa_head, *t.y_sa);
      }
      break;
    }
  }
  return out;
}

}  // namespace

ObjectiveTerms objective_terms(const VmArch& vm, std::span<const double> features,
                               const Targets& targets, DistillMode mode,
                               const AHConfig& cfg) {
  return logit_grads(models::forward(vm, features), targets, mode, cfg).terms;
}

GradientResult vm_gradients(const VmArch& vm, std::span<const double> features,
                            const Targets& targets, DistillMode mode, const AHConfig& cfg) {
  const auto fwd = models::forward(vm, features);
  const auto lg = logit_grads(fwd, targets, mode, cfg);
  if (vm.grad_scale == cfg.grad_scale) {
    return {models::backward(vm, fwd, lg.heads), lg.terms};
  }
  // backward() reads beta from the architecture.
  VmArch scaled = vm;
  scaled.grad_scale = cfg.grad_scale;
  return {models::backward(scaled, fwd, lg.heads), lg.terms};
}

TrainStepReport vm_train_step(VmArch& vm, StudentAdapter& sa, const TrainExample& example,
                              DistillMode mode, const AHConfig& cfg,
                              const TrainOptions& opts) {
  return vm_train_batch(vm, sa, std::span<const TrainExample>(&example, 1), mode, cfg, opts);
}

TrainStepReport vm_train_batch(VmArch& vm, StudentAdapter& sa,
                               std::span<const TrainExample> batch, DistillMode mode,
                               const AHConfig& cfg, const TrainOptions& opts) {
  TrainStepReport report;
  if (batch.empty()) return report;
  for (const auto& ex : batch) {
    require_supervision(Targets{ex.label, ex.y_f, std::nullopt}, mode);
  }
  vm.grad_scale = cfg.grad_scale;
  const double inv = 1.0 / double(batch.size());

  // Adapter first, on its own loss.
  std::vector<std::optional<double>> sa_targets(batch.size());
  if (mode == DistillMode::kAHPlusSA) {
    models::MlpGrads sa_grads = sa.net.zeros_like();
    models::MlpCache cache;
    for (const auto& ex : batch) {
      const double z = models::sa_logit(sa, *ex.y_f, &cache);
      report.loss_sta += inv * bce(z, ex.label);
      const double dz[1] = {inv * bce_grad(z, ex.label)};
      models::mlp_backward(sa.net, cache, dz, sa_grads);
    }
    if (opts.sa_lr > 0.0) models::sgd_step(sa.net, sa_grads, opts.sa_lr);
    sa.updates += batch.size();
    report.adapter_updated = opts.sa_lr > 0.0;
    report.grad_norm_adapter = std::sqrt(models::squared_norm(sa_grads));
    // Step 2: frozen adapter outputs, used only once warm-up is over.
    if (sa.updates > opts.sa_warmup) {
      for (std::size_t i = 0; i < batch.size(); ++i) {
        sa_targets[i] = sigmoid(models::sa_logit(sa, *batch[i].y_f));
      }
      report.sa_target_used = true;
    }
  }

  // Step 3: vertical model update; `sa` is not referenced past this point.
  VmGrads total = VmGrads::zeros_like(vm);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& ex = batch[i];
    const auto fwd = models::forward(vm, ex.features);
    const auto lg = logit_grads(fwd, Targets{ex.label, ex.y_f, sa_targets[i]}, mode, cfg);
    total.add(models::backward(vm, fwd, lg.heads));
    report.loss_serving += inv * lg.terms.loss_s;
    report.loss_distill += inv * lg.terms.loss_d;
    report.loss_sa += inv * lg.terms.loss_sa;
  }
  total.scale(inv);
  report.grad_norm_backbone = std::sqrt(models::squared_norm(total.backbone));
  report.grad_norm_serving = std::sqrt(models::squared_norm(total.serving_head));
  report.grad_norm_ah = std::sqrt(models::squared_norm(total.ah_head));
  report.grad_norm_sa_head = std::sqrt(models::squared_norm(total.sa_head));
  models::sgd_step(vm, total, opts.lr);
  report.vm_updated = opts.lr > 0.0;
  return report;
}

}  // namespace exfm::distill
