#pragma once

#include <span>
#include <string>
#include <string_view>

namespace evidentia {

/// Instruction-style layout: evidence first, then the instruction and the
/// claim, then an empty response slot.
struct PromptTemplate {
  std::string instruction_header = "### Instruction\n";
  std::string instruction = "; Based on the above evidence, determine if the claim is valid and explain why: ";
  std::string response_header = "\n### Response\n";
  std::string evidence_separator = "\n";
};

/// Evidence is joined in the given order. Throws ArgumentError when
/// `evidence` is empty.
std::string render_prompt(const PromptTemplate& tmpl, std::string_view claim,
                          std::span<const std::string> evidence);
std::string render_prompt(std::string_view claim, std::span<const std::string> evidence);

/// The prompt followed by the response, as used for supervised training.
std::string render_training_text(const PromptTemplate& tmpl, std::string_view claim,
                                 std::span<const std::string> evidence, std::string_view response);

}  // namespace evidentia
