#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "seqdiff/core/optim.hpp"
#include "seqdiff/diffusion/objective.hpp"
#include "seqdiff/model/model.hpp"
#include "seqdiff/sampler/sampler.hpp"

namespace seqdiff {

struct RunConfig {
    // model
    Backbone backbone = Backbone::transformer;
    Index encoder_layers = 8;
    Index decoder_layers = 8;
    Index width = 256;
    Index heads = 4;
    Index ffn_hidden = 0;
    Index state = 16;
    Index expand = 2;
    Index max_source_len = 64;
    Index max_target_len = 16;
    ScanAlgorithm scan = ScanAlgorithm::sequential;

    // diffusion
    ScheduleKind schedule = ScheduleKind::semantic;
    int T = 50;
    int S = 10;
    bool disable_similarity_loss = false;
    bool no_detach_target = false;
    double cls_weight = 1.0;

    // optimization
    Index batch_size = 32;
    long steps = 5000;
    double lr = 1e-3;
    double warmup_start = 1e-5;
    long warmup_steps = 200;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double clip_norm = 1.0;

    // data and io
    std::string train_path;
    std::string dev_path;
    std::string vocab_path;
    std::string checkpoint;
    Index min_count = 1;
    Index dev_limit = 200;
    long log_every = 100;
    long eval_every = 500;
    long save_every = 500;
    LengthSource eval_length = LengthSource::predicted;
    std::uint64_t seed = 0;

    /// Throws ConfigError naming the offending field.
    void validate() const;

    ModelConfig model_config(Index vocab_size) const;
    LossOptions loss_options() const;
    AdamWConfig optimizer() const;

    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& doc);

    /// Sets one field from its text form. Throws ConfigError for unknown keys
    /// or unparsable values.
    void set(const std::string& key, const std::string& value);
    std::string get(const std::string& key) const;
    static const std::vector<std::string>& keys();

    /// Applies "key = value" lines; '#' starts a comment.
    void apply_text(const std::string& text);
    void apply_file(const std::string& path);
};

}  // namespace seqdiff
