#include "lorank/optimizer.hpp"

namespace lorank {

std::string_view to_string(StepRule rule) {
  return rule == StepRule::Fixed ? "fixed" : "backtracking";
}

StepRule parse_step_rule(std::string_view text) {
  if (text == "fixed") return StepRule::Fixed;
  if (text == "backtracking") return StepRule::Backtracking;
  fail(ErrorClass::Config,
       "unknown step rule '" + std::string(text) + "' (expected fixed or backtracking)");
}

void validate(const TrainConfig& cfg) {
  auto check = [](bool ok, const std::string& msg) { require(ok, ErrorClass::Config, msg); };
  check(cfg.rank >= 1, "rank must be >= 1");
  check(cfg.base_step > 0 && std::isfinite(cfg.base_step), "base_step must be positive");
  check(cfg.max_step >= cfg.base_step, "max_step must be >= base_step");
  check(cfg.armijo > 0 && cfg.armijo < 1, "armijo constant must lie in (0, 1)");
  check(cfg.max_iters >= 0, "max_iters must be non-negative");
  check(!cfg.lambda_schedule.empty(), "lambda schedule is empty");
  for (const LambdaStage& s : cfg.lambda_schedule) {
    check(s.lambda >= 0 && std::isfinite(s.lambda), "lambda values must be finite and >= 0");
    check(s.grad_tol > 0, "gradient tolerances must be positive");
  }
  for (std::size_t i = 1; i < cfg.lambda_schedule.size(); ++i)
    check(cfg.lambda_schedule[i].lambda < cfg.lambda_schedule[i - 1].lambda,
          "lambda schedule must be strictly decreasing");
  check(cfg.record_interval >= 1, "record_interval must be >= 1");
  check(cfg.newton_switch > 0, "newton_switch must be positive");
  check(cfg.newton_cooldown >= 0, "newton_cooldown must be non-negative");
  check(cfg.polish_steps >= 0, "polish_steps must be non-negative");
  check(cfg.divergence_factor > 1, "divergence_factor must exceed 1");
}

}  // namespace lorank
