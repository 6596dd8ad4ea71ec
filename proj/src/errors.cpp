#include "lorank/errors.hpp"

#include "lorank/types.hpp"

namespace lorank {

std::string_view to_string(ErrorClass cls) {
  switch (cls) {
    case ErrorClass::Config: return "ConfigError";
    case ErrorClass::CapExceeded: return "CapExceeded";
    case ErrorClass::InputMissing: return "InputMissing";
    case ErrorClass::Domain: return "DomainError";
    case ErrorClass::DimensionMismatch: return "DimensionMismatch";
    case ErrorClass::Format: return "FormatError";
    case ErrorClass::RankDeficient: return "RankDeficient";
    case ErrorClass::NotConverged: return "NotConverged";
    case ErrorClass::Infeasible: return "Infeasible";
    case ErrorClass::Undefined: return "Undefined";
  }
  return "Unknown";
}

LossKind parse_loss_kind(std::string_view text) {
  if (text == "MSE" || text == "mse") return LossKind::MSE;
  if (text == "CE" || text == "ce") return LossKind::CE;
  fail(ErrorClass::Config, "unknown loss kind '" + std::string(text) + "' (expected MSE or CE)");
}

}  // namespace lorank
