#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "seqdiff/eval/metrics.hpp"

namespace seqdiff {

struct ExampleRecord {
    std::string source;
    std::string reference;
    std::string hypothesis;
    double rouge1 = 0.0, rouge2 = 0.0, rougeL = 0.0, bleu = 0.0;
};

struct EvalReport {
    double rouge1 = 0.0, rouge2 = 0.0, rougeL = 0.0;  // mean F1 over examples, percent
    double bleu = 0.0;                                // corpus BLEU, percent
    double exact_match = 0.0;                         // fraction of exact hypotheses
    std::vector<ExampleRecord> examples;
    std::optional<EntropyStats> entropy;
    nlohmann::json speed;  // optional speed section

    nlohmann::json to_json() const;
};

/// Scores hypotheses against references. Throws ContractError on mismatched
/// sizes.
EvalReport evaluate(const std::vector<std::string>& sources, const std::vector<std::string>& references,
                    const std::vector<std::string>& hypotheses);

/// Checks a document against the report shape; returns the first problem.
std::optional<std::string> validate_report_json(const nlohmann::json& doc);

}  // namespace seqdiff
