#include "evidentia/prompt.hpp"

#include "evidentia/error.hpp"

namespace evidentia {

std::string render_prompt(const PromptTemplate& tmpl, std::string_view claim,
                          std::span<const std::string> evidence) {
  if (evidence.empty()) throw ArgumentError("prompt needs at least one evidence document");
  std::string out = tmpl.instruction_header;
  for (std::size_t i = 0; i < evidence.size(); ++i) {
    if (i > 0) out += tmpl.evidence_separator;
    out += evidence[i];
  }
  out += tmpl.instruction;
  out += claim;
  out += tmpl.response_header;
  return out;
}

std::string render_prompt(std::string_view claim, std::span<const std::string> evidence) {
  return render_prompt(PromptTemplate{}, claim, evidence);
}

std::string render_training_text(const PromptTemplate& tmpl, std::string_view claim,
                                 std::span<const std::string> evidence, std::string_view response) {
  std::string out = render_prompt(tmpl, claim, evidence);
  out += response;
  return out;
}

}  // namespace evidentia
