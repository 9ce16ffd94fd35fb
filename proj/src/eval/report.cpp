#include "seqdiff/eval/report.hpp"

#include "seqdiff/core/errors.hpp"

namespace seqdiff {

EvalReport evaluate(const std::vector<std::string>& sources, const std::vector<std::string>& references,
                    const std::vector<std::string>& hypotheses) {
    if (sources.size() != references.size() || references.size() != hypotheses.size()) {
        throw ContractError("evaluate: sources, references and hypotheses differ in count");
    }
    EvalReport r;
    for (std::size_t i = 0; i < references.size(); ++i) {
        ExampleRecord e{sources[i], references[i], hypotheses[i]};
        e.rouge1 = rouge_n(e.hypothesis, e.reference, 1);
        e.rouge2 = rouge_n(e.hypothesis, e.reference, 2);
        e.rougeL = rouge_l(e.hypothesis, e.reference);
        e.bleu = bleu(e.hypothesis, e.reference);
        r.rouge1 += e.rouge1;
        r.rouge2 += e.rouge2;
        r.rougeL += e.rougeL;
        r.exact_match += metric_tokens(e.hypothesis) == metric_tokens(e.reference) ? 1.0 : 0.0;
        r.examples.push_back(std::move(e));
    }
    if (!references.empty()) {
        const double n = static_cast<double>(references.size());
        r.rouge1 /= n;
        r.rouge2 /= n;
        r.rougeL /= n;
        r.exact_match /= n;
        r.bleu = corpus_bleu(hypotheses, references);
    }
    return r;
}

nlohmann::json EvalReport::to_json() const {
    nlohmann::json doc;
    doc["rouge1"] = rouge1;
    doc["rouge2"] = rouge2;
    doc["rougeL"] = rougeL;
    doc["bleu"] = bleu;
    doc["exact_match"] = exact_match;
    doc["examples"] = nlohmann::json::array();
    for (const auto& e : examples) {
        doc["examples"].push_back({{"source", e.source},
                                   {"reference", e.reference},
                                   {"hypothesis", e.hypothesis},
                                   {"rouge1", e.rouge1},
                                   {"rouge2", e.rouge2},
                                   {"rougeL", e.rougeL},
                                   {"bleu", e.bleu}});
    }
    if (entropy) {
        doc["entropy"] = {{"mean_bits", entropy->mean_bits},
                          {"max_bits", entropy->max_bits},
                          {"count", entropy->per_example.size()},
                          {"skipped", entropy->skipped}};
    }
    if (!speed.is_null()) doc["speed"] = speed;
    return doc;
}

std::optional<std::string> validate_report_json(const nlohmann::json& doc) {
    if (!doc.is_object()) return "report is not an object";
    for (const char* key : {"rouge1", "rouge2", "rougeL", "bleu"}) {
        if (!doc.contains(key) || !doc[key].is_number()) return std::string("missing number ") + key;
        const double v = doc[key].get<double>();
        if (v < 0.0 || v > 100.0) return std::string(key) + " outside [0, 100]";
    }
    if (!doc.contains("examples") || !doc["examples"].is_array()) return "missing examples array";
    for (const auto& e : doc["examples"]) {
        for (const char* key : {"source", "reference", "hypothesis"}) {
            if (!e.contains(key) || !e[key].is_string()) return std::string("example lacks string ") + key;
        }
        for (const char* key : {"rouge1", "rouge2", "rougeL", "bleu"}) {
            if (!e.contains(key) || !e[key].is_number()) return std::string("example lacks number ") + key;
        }
    }
    if (doc.contains("entropy")) {
        for (const char* key : {"mean_bits", "max_bits", "count", "skipped"}) {
            if (!doc["entropy"].contains(key)) return std::string("entropy lacks ") + key;
        }
    }
    return std::nullopt;
}

}  // namespace seqdiff
