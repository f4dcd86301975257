#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "tilevlm/model.hpp"

namespace tvlm {

// Masked mean KL divergence between the student's and a frozen teacher's
// next-token distributions at temperature T:
//   mean over masked rows of sum_j ps_j * (log ps_j - log pt_j),
// with p = softmax(logits / T), student distribution first. Gradient reaches
// only the student; the teacher side is a constant regardless of grad flags.
inline Tensor kd_divergence(const Tensor& student, const Tensor& teacher,
                            const std::vector<bool>& mask, double temperature = 1.0) {
  if (temperature <= 0.0)
    throw ParameterError("kd temperature must be positive, got " + std::to_string(temperature));
  detail::check_same_shape(student, teacher, "kd_divergence");
  if (student.ndim() != 2) throw DimensionError("kd_divergence: logits must be 2-d");
  std::size_t n = student.rows(), v = student.cols();
  if (mask.size() != n)
    throw DimensionError("kd_divergence: " + std::to_string(n) + " rows vs " +
                         std::to_string(mask.size()) + " mask flags");
  std::size_t m = 0;
  for (bool b : mask) m += b ? 1 : 0;
  if (m == 0) throw ContractError("kd_divergence: mask selects no positions");

  // Stable log-softmax of one row at the given temperature.
  auto log_softmax_row = [v, temperature](const double* row, std::vector<double>& out) {
    double mx = row[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp((row[j] - mx) / temperature);
    double lz = std::log(z);
    for (std::size_t j = 0; j < v; ++j) out[j] = (row[j] - mx) / temperature - lz;
  };

  Tensor out = Tensor::zeros({1});
  {
    std::vector<double> ls(v), lt(v);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!mask[i]) continue;
      log_softmax_row(student.value().data() + i * v, ls);
      log_softmax_row(teacher.value().data() + i * v, lt);
      double kl = 0.0;
      for (std::size_t j = 0; j < v; ++j) kl += std::exp(ls[j]) * (ls[j] - lt[j]);
      acc += kl;
    }
    out.mutable_value()[0] = acc / static_cast<double>(m);
  }
  flops_add(8 * m * v);

  if (grad_mode() && student.requires_grad()) {
    out.set_requires_grad();
    tape().record(
        {[sd = student.ptr(), td = teacher.ptr(), od = out.ptr(), mask, n, v, m, temperature,
          log_softmax_row]() {
           if (od->grad.empty()) return;
           auto* g = detail::grad_target(*sd);
           if (!g) return;
           double s0 = od->grad[0] / (static_cast<double>(m) * temperature);
           std::vector<double> ls(v), lt(v);
           for (std::size_t i = 0; i < n; ++i) {
             if (!mask[i]) continue;
             log_softmax_row(sd->value.data() + i * v, ls);
             log_softmax_row(td->value.data() + i * v, lt);
             double kl = 0.0;
             for (std::size_t j = 0; j < v; ++j) kl += std::exp(ls[j]) * (ls[j] - lt[j]);
             for (std::size_t j = 0; j < v; ++j)
               (*g)[i * v + j] += s0 * std::exp(ls[j]) * ((ls[j] - lt[j]) - kl);
           }
         },
         out.ptr(),
         {student.ptr(), teacher.ptr()}});
  }
  return out;
}

// Which branch trains at a given step: blocks of `period` steps alternate,
// starting with the large branch. period=1 gives L,S,L,S,...; period=2 gives
// L,L,S,S,...
inline Branch active_branch(std::size_t step, std::size_t period) {
  if (period == 0) throw ParameterError("alternation period must be positive");
  return (step / period) % 2 == 0 ? Branch::kLarge : Branch::kSmall;
}

struct DclOptions {
  double lambda = 1.0;       // weight on the distillation term (0 disables it)
  double temperature = 1.0;  // softening for both distributions
  std::size_t period = 1;    // branch alternation period
  double lr = 0.05;
};

struct DclStepStats {
  std::size_t step = 0;
  Branch branch = Branch::kLarge;
  double ce = 0.0;
  double kd = 0.0;  // zero on large-branch steps by construction
};

// One alternating-update step. Large-branch steps train on plain cross
// entropy. Small-branch steps add the distillation pull toward the large
// branch's predictions, computed with the teacher frozen. Shared projector
// and decoder parameters receive gradient on every step.
template <typename SampleT>
DclStepStats dcl_train_step(Engine& engine, const SampleT& sample, std::size_t step,
                            const DclOptions& opt, ParamMap& params) {
  Branch student = active_branch(step, opt.period);

  auto [student_logits, sb] = engine.sample_logits(sample.image, sample.prompt, sample.answer, student);
  Tensor ce = masked_cross_entropy(student_logits, sb.targets, sb.loss_mask);

  DclStepStats stats;
  stats.step = step;
  stats.branch = student;
  stats.ce = ce.item();

  Tensor total = ce;
  if (student == Branch::kSmall && opt.lambda != 0.0) {
    Tensor teacher_logits;
    {
      NoGradGuard ng;
      teacher_logits =
          engine.sample_logits(sample.image, sample.prompt, sample.answer, Branch::kLarge).first;
    }
    Tensor kd = kd_divergence(student_logits, teacher_logits, sb.loss_mask, opt.temperature);
    stats.kd = kd.item();
    total = add(ce, scale(kd, opt.lambda));
  }

  backward(total);
  for (auto& [name, t] : params.items) {
    sgd_step(t, opt.lr);
    t.zero_grad();
  }
  tape().clear();
  return stats;
}

template <typename SampleT>
std::vector<DclStepStats> run_dcl_training(Engine& engine, const std::vector<SampleT>& samples,
                                           std::size_t steps, const DclOptions& opt) {
  if (samples.empty()) throw ContractError("dcl training needs at least one sample");
  ParamMap params = engine.params();
  std::vector<DclStepStats> log;
  log.reserve(steps);
  for (std::size_t s = 0; s < steps; ++s)
    log.push_back(dcl_train_step(engine, samples[s % samples.size()], s, opt, params));
  return log;
}

// Plain supervised training of a single branch, no distillation. Samples
// cycle round-robin, one per step.
template <typename SampleT>
std::vector<double> ce_train(Engine& engine, const std::vector<SampleT>& samples, Branch b,
                             std::size_t steps, double lr) {
  if (samples.empty()) throw ContractError("training needs at least one sample");
  ParamMap params = engine.params();
  std::vector<double> losses;
  losses.reserve(steps);
  for (std::size_t s = 0; s < steps; ++s) {
    const SampleT& smp = samples[s % samples.size()];
    Tensor loss = engine.sample_loss(smp.image, smp.prompt, smp.answer, b);
    losses.push_back(loss.item());
    backward(loss);
    for (auto& [name, t] : params.items) {
      sgd_step(t, lr);
      t.zero_grad();
    }
    tape().clear();
  }
  return losses;
}

// Mean supervised cross entropy of one branch over a sample set.
template <typename SampleT>
double eval_mean_ce(const Engine& engine, const std::vector<SampleT>& samples, Branch b) {
  if (samples.empty()) throw ContractError("eval set is empty");
  NoGradGuard ng;
  double acc = 0.0;
  for (const SampleT& s : samples) acc += engine.sample_loss(s.image, s.prompt, s.answer, b).item();
  return acc / static_cast<double>(samples.size());
}

// Mean masked KL between the two branches' answer-token distributions
// (small as student, large as teacher) — the quantity distillation is meant
// to shrink.
template <typename SampleT>
double branch_agreement_kl(const Engine& engine, const std::vector<SampleT>& samples,
                           double temperature = 1.0) {
  if (samples.empty()) throw ContractError("eval set is empty");
  NoGradGuard ng;
  double acc = 0.0;
  for (const SampleT& s : samples) {
    auto [small_logits, sb] = engine.sample_logits(s.image, s.prompt, s.answer, Branch::kSmall);
    Tensor large_logits = engine.sample_logits(s.image, s.prompt, s.answer, Branch::kLarge).first;
    acc += kd_divergence(small_logits, large_logits, sb.loss_mask, temperature).item();
  }
  return acc / static_cast<double>(samples.size());
}

}  // namespace tvlm
