#include "lorank/landscape.hpp"

namespace lorank {

std::string_view to_string(Classification c) {
  switch (c) {
    case Classification::GlobalMin: return "GlobalMin";
    case Classification::SpuriousSOSP: return "SpuriousSOSP";
    case Classification::StrictSaddle: return "StrictSaddle";
    case Classification::NotConverged: return "NotConverged";
  }
  return "NotConverged";
}

Classification parse_classification(std::string_view text) {
  for (Classification c : {Classification::GlobalMin, Classification::SpuriousSOSP,
                           Classification::StrictSaddle, Classification::NotConverged})
    if (to_string(c) == text) return c;
  fail(ErrorClass::Format, "unknown classification '" + std::string(text) + "'");
}

}  // namespace lorank
