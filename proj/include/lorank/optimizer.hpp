#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lorank/caps.hpp"
#include "lorank/errors.hpp"
#include "lorank/model.hpp"
#include "lorank/parallel.hpp"
#include "lorank/rng.hpp"

namespace lorank {

enum class StepRule { Fixed, Backtracking };

std::string_view to_string(StepRule rule);
StepRule parse_step_rule(std::string_view text);

struct LambdaStage {
  double lambda = 0.0;
  double grad_tol = 1e-8;
};

struct TrainConfig {
  int rank = 1;
  // Negative means 1e-2 / sqrt(max(m, n)); zero starts at the origin.
  double init_scale = -1.0;
  StepRule step_rule = StepRule::Backtracking;
  double base_step = 1.0;
  double max_step = 1e3;
  double armijo = 1e-4;
  long max_iters = 200000;  // per stage
  std::vector<LambdaStage> lambda_schedule = {{1e-2, 1e-6}, {1e-3, 1e-7}, {1e-4, 1e-8}};
  std::vector<std::uint64_t> seeds = {0};
  int record_interval = 10;
  // Damped Newton steps once the gradient is below newton_switch and the
  // dense Hessian is positive definite; otherwise plain descent continues.
  bool newton_refine = true;
  double newton_switch = 1e-3;
  int newton_cooldown = 20;
  // Extra full Newton steps after the last stage converges, kept only while
  // they reduce the gradient norm.
  int polish_steps = 4;
  double divergence_factor = 1e6;

  double final_lambda() const { return lambda_schedule.back().lambda; }
  double final_tol() const { return lambda_schedule.back().grad_tol; }
  double resolved_init_scale(int m, int n) const {
    return init_scale >= 0 ? init_scale : 1e-2 / std::sqrt(double(std::max(m, n)));
  }
};

// Throws ErrorClass::Config on an invalid configuration.
void validate(const TrainConfig& cfg);

struct TracePoint {
  int stage = 0;
  long iteration = 0;
  double total_loss = 0.0;
  double data_loss = 0.0;
  double grad_norm = 0.0;
};

template <typename Scalar>
struct RunResult {
  LoraPoint<Scalar> point;
  LossReport<Scalar> loss;
  double grad_norm = 0.0;
  std::vector<TracePoint> trace;
  long iterations = 0;
  long newton_steps = 0;
  bool converged = false;
  int stage_reached = -1;  // index of the last stage whose tolerance was met
  std::uint64_t seed = 0;
  std::string diagnostic;  // non-empty on divergence, stalls or caught errors
};

template <typename Scalar>
LoraPoint<Scalar> init_point(int m, int n, int r, double init_scale, std::uint64_t seed,
                             Scalar lambda = Scalar(0)) {
  require(init_scale >= 0, ErrorClass::Domain, "init_scale must be non-negative");
  Rng rng(seed, Stream::Init);
  LoraPoint<Scalar> p;
  p.u = rng.normal_matrix<Scalar>(m, r, Scalar(init_scale));
  p.v = rng.normal_matrix<Scalar>(n, r, Scalar(init_scale));
  p.lambda = lambda;
  return p;
}

namespace detail {

template <typename Scalar>
Scalar total_loss_at(const ProblemInstance<Scalar>& inst, const LoraPoint<Scalar>& p,
                     LossKind kind) {
  return detail::data_loss(inst, predict(inst, p), kind) + regularization(p);
}

template <typename Scalar>
LoraPoint<Scalar> stepped(const LoraPoint<Scalar>& p, const FactorPair<Scalar>& dir, Scalar t) {
  return {p.u - t * dir.du, p.v - t * dir.dv, p.lambda};
}

}  // namespace detail

// Staged full-batch descent: one descent phase per lambda in the schedule,
// each warm-started from the previous stage's endpoint.
template <typename Scalar>
RunResult<Scalar> train(const ProblemInstance<Scalar>& inst, const TrainConfig& cfg,
                        LossKind kind, std::uint64_t seed, const Caps& caps = {}) {
  validate(cfg);
  const int m = inst.m(), n = inst.n(), r = cfg.rank;
  require(r <= std::min(m, n), ErrorClass::Domain, "rank exceeds min(m, n)");

  RunResult<Scalar> res;
  res.seed = seed;
  res.point = init_point<Scalar>(m, n, r, cfg.resolved_init_scale(m, n), seed,
                                 Scalar(cfg.lambda_schedule.front().lambda));
  if (cfg.max_iters == 0) {
    res.point.lambda = Scalar(cfg.final_lambda());
    const auto ev = evaluate(inst, res.point, kind);
    res.loss = ev.loss;
    res.grad_norm = double(ev.gradient.norm());
    res.diagnostic = "max_iters = 0; returning the initialization";
    return res;
  }

  const Index dim = Index(r) * (m + n);
  const bool newton_possible = cfg.newton_refine && dim <= caps.dense_hessian_dim;
  LoraPoint<Scalar>& p = res.point;
  Scalar step = Scalar(cfg.base_step);

  for (std::size_t s = 0; s < cfg.lambda_schedule.size(); ++s) {
    const LambdaStage& stage = cfg.lambda_schedule[s];
    p.lambda = Scalar(stage.lambda);
    bool stage_done = false;
    long cooldown = 0;
    Scalar stage_start_loss = Scalar(0);

    for (long it = 0; it <= cfg.max_iters; ++it) {
      const Evaluation<Scalar> ev = evaluate(inst, p, kind);
      const Scalar gnorm = ev.gradient.norm();
      if (it == 0) stage_start_loss = ev.loss.total;
      const bool record = it % cfg.record_interval == 0;
      if (record || gnorm <= stage.grad_tol || it == cfg.max_iters) {
        res.trace.push_back({int(s), it, double(ev.loss.total), double(ev.loss.data_loss),
                             double(gnorm)});
      }
      if (!std::isfinite(double(ev.loss.total)) ||
          ev.loss.total > cfg.divergence_factor * std::max(stage_start_loss, Scalar(1e-300))) {
        res.diagnostic = "diverged in stage " + std::to_string(s) + ": loss " +
                         std::to_string(double(ev.loss.total)) + " vs stage start " +
                         std::to_string(double(stage_start_loss));
        res.loss = ev.loss;
        res.grad_norm = double(gnorm);
        return res;
      }
      if (gnorm <= stage.grad_tol) {
        stage_done = true;
        break;
      }
      if (it == cfg.max_iters) break;
      ++res.iterations;

      if (newton_possible && gnorm <= cfg.newton_switch && cooldown <= 0) {
        const Matrix<Scalar> H = assemble_hessian(inst, p, kind, caps);
        Eigen::LLT<Matrix<Scalar>> llt(H);
        bool accepted = false;
        if (llt.info() == Eigen::Success) {
          const Vector<Scalar> g = ev.gradient.flat();
          const Vector<Scalar> d = llt.solve(g);
          const Scalar slope = g.dot(d);
          if (slope > Scalar(0) && d.allFinite()) {
            const FactorPair<Scalar> dir = FactorPair<Scalar>::unflatten(d, m, n, r);
            Scalar t = Scalar(1);
            for (int k = 0; k < 40 && !accepted; ++k, t *= Scalar(0.5)) {
              LoraPoint<Scalar> trial = detail::stepped(p, dir, t);
              if (detail::total_loss_at(inst, trial, kind) <=
                  ev.loss.total - Scalar(cfg.armijo) * t * slope) {
                p = std::move(trial);
                accepted = true;
              }
            }
          }
        }
        if (accepted) {
          ++res.newton_steps;
          continue;
        }
        cooldown = cfg.newton_cooldown;
      }
      --cooldown;

      const Scalar g2 = gnorm * gnorm;
      if (cfg.step_rule == StepRule::Fixed) {
        p = detail::stepped(p, ev.gradient, Scalar(cfg.base_step));
        continue;
      }
      Scalar t = std::min(Scalar(2) * step, Scalar(cfg.max_step));
      bool accepted = false;
      while (t > Scalar(1e-30)) {
        LoraPoint<Scalar> trial = detail::stepped(p, ev.gradient, t);
        if (detail::total_loss_at(inst, trial, kind) <= ev.loss.total - Scalar(cfg.armijo) * t * g2) {
          p = std::move(trial);
          accepted = true;
          break;
        }
        t *= Scalar(0.5);
      }
      if (!accepted) {
        res.diagnostic = "line search stalled in stage " + std::to_string(s) +
                         " at gradient norm " + std::to_string(double(gnorm));
        break;
      }
      step = t;
    }
    if (!stage_done) break;
    res.stage_reached = int(s);
  }

  p.lambda = Scalar(cfg.final_lambda());
  if (newton_possible && res.stage_reached == int(cfg.lambda_schedule.size()) - 1) {
    Evaluation<Scalar> cur = evaluate(inst, p, kind);
    // Pseudo-inverse steps: for r >= 2 the rotation symmetry (u, v) -> (uO, vO)
    // leaves the Hessian singular, which defeats a Cholesky solve.
    for (int k = 0; k < cfg.polish_steps; ++k) {
      const Eigen::SelfAdjointEigenSolver<Matrix<Scalar>> es(assemble_hessian(inst, p, kind, caps));
      if (es.info() != Eigen::Success) break;
      const Vector<Scalar>& ev = es.eigenvalues();
      const Scalar cutoff = Scalar(1e-10) * ev.cwiseAbs().maxCoeff();
      Vector<Scalar> coef = es.eigenvectors().transpose() * cur.gradient.flat();
      for (Index i = 0; i < coef.size(); ++i)
        coef(i) = std::abs(ev(i)) > cutoff ? coef(i) / ev(i) : Scalar(0);
      const Vector<Scalar> d = es.eigenvectors() * coef;
      if (!d.allFinite()) break;
      LoraPoint<Scalar> trial =
          detail::stepped(p, FactorPair<Scalar>::unflatten(d, m, n, r), Scalar(1));
      Evaluation<Scalar> next = evaluate(inst, trial, kind);
      if (!(next.gradient.norm() < cur.gradient.norm())) break;
      p = std::move(trial);
      cur = std::move(next);
      ++res.newton_steps;
    }
  }
  const Evaluation<Scalar> fin = evaluate(inst, p, kind);
  res.loss = fin.loss;
  res.grad_norm = double(fin.gradient.norm());
  res.converged = res.stage_reached == int(cfg.lambda_schedule.size()) - 1 &&
                  res.grad_norm <= cfg.final_tol();
  return res;
}

// One run per configured seed, gathered in seed order.
template <typename Scalar>
std::vector<RunResult<Scalar>> multi_seed(const ProblemInstance<Scalar>& inst,
                                          const TrainConfig& cfg, LossKind kind,
                                          int workers = 1, const Caps& caps = {}) {
  require(!cfg.seeds.empty(), ErrorClass::Config, "multi_seed needs at least one seed");
  std::vector<RunResult<Scalar>> out(cfg.seeds.size());
  parallel_for(cfg.seeds.size(), workers, [&](std::size_t i) {
    try {
      out[i] = train(inst, cfg, kind, cfg.seeds[i], caps);
    } catch (const Error& e) {
      out[i] = RunResult<Scalar>{};
      out[i].seed = cfg.seeds[i];
      out[i].diagnostic = std::string(to_string(e.error_class())) + ": " + e.what();
    }
  });
  return out;
}

}  // namespace lorank
