#include "seqdiff/cli/trainer.hpp"

#include <algorithm>
#include <cmath>

#include "seqdiff/diffusion/objective.hpp"
#include "seqdiff/sampler/sampler.hpp"

namespace seqdiff {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (salt + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

Trainer::Trainer(RunConfig config, Vocab vocab, std::vector<Example> train)
    : config_(std::move(config)), vocab_(std::move(vocab)), train_(std::move(train)) {
    config_.validate();
    model_ = std::make_unique<TrainModel>(config_.model_config(vocab_.size()), config_.seed);
    optim_ = std::make_unique<OptimState<float>>(model_->params());
}

RunConfig Trainer::checkpoint_config(const Checkpoint& ckpt) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(ckpt.config_json);
    } catch (const nlohmann::json::parse_error& e) {
        throw CorruptFileError(std::string("checkpoint: config blob is not JSON: ") + e.what());
    }
    if (!doc.contains("config")) throw CorruptFileError("checkpoint: config blob lacks config");
    return RunConfig::from_json(doc["config"]);
}

Vocab Trainer::checkpoint_vocab(const Checkpoint& ckpt) {
    const auto doc = nlohmann::json::parse(ckpt.config_json, nullptr, false);
    if (doc.is_discarded() || !doc.contains("vocab") || !doc["vocab"].is_array()) {
        throw CorruptFileError("checkpoint: config blob lacks vocab");
    }
    try {
        return Vocab::from_words(doc["vocab"].get<std::vector<std::string>>());
    } catch (const std::exception& e) {
        throw CorruptFileError(std::string("checkpoint: bad vocab: ") + e.what());
    }
}

Trainer Trainer::from_checkpoint(const Checkpoint& ckpt, std::vector<Example> train,
                                 const std::optional<RunConfig>& config) {
    const auto doc = nlohmann::json::parse(ckpt.config_json, nullptr, false);
    Trainer t(config ? *config : checkpoint_config(ckpt), checkpoint_vocab(ckpt), std::move(train));
    auto restore = [&](const std::string& name, Matrix<float>& slot) {
        const auto* nt = ckpt.find(name);
        if (!nt) throw CorruptFileError("checkpoint: missing tensor " + name);
        if (nt->value.rows() != slot.rows() || nt->value.cols() != slot.cols()) {
            throw CorruptFileError("checkpoint: tensor " + name + " has the wrong shape");
        }
        slot = nt->value;
    };
    const auto& params = t.model_->params().all();
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params[i];
        restore(p.name(), p.value());
        restore("optim.m/" + p.name(), t.optim_->first_moment[i]);
        restore("optim.v/" + p.name(), t.optim_->second_moment[i]);
    }
    if (ckpt.tensors.size() != 3 * params.size()) throw CorruptFileError("checkpoint: unexpected extra tensors");
    if (!doc.contains("train") || !doc["train"].contains("step")) throw CorruptFileError("checkpoint: missing step");
    t.optim_->step = doc["train"]["step"].get<long>();
    return t;
}

Checkpoint Trainer::checkpoint() const {
    nlohmann::json doc;
    doc["config"] = config_.to_json();
    doc["vocab"] = vocab_.words();
    doc["train"] = {{"step", optim_->step}};
    Checkpoint ckpt;
    ckpt.config_json = doc.dump();
    const auto& params = model_->params().all();
    for (const auto& p : params) ckpt.tensors.push_back({p.name(), p.value()});
    for (std::size_t i = 0; i < params.size(); ++i) {
        ckpt.tensors.push_back({"optim.m/" + params[i].name(), optim_->first_moment[i]});
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        ckpt.tensors.push_back({"optim.v/" + params[i].name(), optim_->second_moment[i]});
    }
    return ckpt;
}

const Batch& Trainer::batch_for(long step) {
    if (train_.empty()) throw DataError("train: no training examples");
    const long per_epoch = (static_cast<long>(train_.size()) + config_.batch_size - 1) / config_.batch_size;
    const long epoch = step / per_epoch;
    if (epoch != cached_epoch_) {
        epoch_batches_ = batchify(train_, config_.batch_size, mix_seed(config_.seed, static_cast<std::uint64_t>(epoch)));
        cached_epoch_ = epoch;
    }
    return epoch_batches_[static_cast<std::size_t>(step % per_epoch)];
}

StepLog Trainer::step() {
    const long k = optim_->step;
    const Batch& batch = batch_for(k);
    auto terms = total_loss(*model_, batch, config_.loss_options(), mix_seed(~config_.seed, static_cast<std::uint64_t>(k)));
    auto objective = terms.total + terms.length;
    if (!std::isfinite(static_cast<double>(objective.item()))) {
        throw NumericError("train: non-finite loss at step " + std::to_string(k + 1));
    }
    model_->params().zero_grad();
    backward(objective);
    StepLog log;
    log.lr = adamw_step(model_->params(), *optim_, config_.optimizer());
    log.step = optim_->step;
    log.total = terms.vb + terms.cls + terms.ce;
    log.vb = terms.vb;
    log.cls = terms.cls;
    log.ce = terms.ce;
    log.length = terms.length_value;
    log.masked = terms.masked;
    return log;
}

DevResult Trainer::evaluate(const std::vector<Pair>& dev, int steps, LengthSource length, Index limit,
                            std::uint64_t seed) const {
    std::size_t n = dev.size();
    if (limit > 0) n = std::min(n, static_cast<std::size_t>(limit));
    const Limits limits{config_.max_source_len, config_.max_target_len};
    std::vector<std::string> sources, refs, hyps;
    long length_hits = 0;
    SamplePlan plan;
    plan.steps = steps;
    plan.length = length;
    plan.seed = seed;
    const auto chunk = static_cast<std::size_t>(std::max<Index>(config_.batch_size, 1));
    for (std::size_t start = 0; start < n; start += chunk) {
        const std::size_t end = std::min(n, start + chunk);
        std::vector<std::vector<Index>> src;
        std::vector<Index> ref_len;
        for (std::size_t i = start; i < end; ++i) {
            auto ex = make_example(vocab_, dev[i], limits);
            src.push_back(ex.source);
            ref_len.push_back(static_cast<Index>(ex.target.size()));
            sources.push_back(dev[i].source);
            refs.push_back(vocab_.decode(ex.target));
        }
        {
            NoGradGuard no_grad;
            const auto dist = model_->predict_length(model_->encode_source(src));
            for (std::size_t b = 0; b < dist.size(); ++b) {
                const Index best = 1 + static_cast<Index>(std::max_element(dist[b].begin(), dist[b].end()) - dist[b].begin());
                length_hits += best == ref_len[b];
            }
        }
        for (const auto& r : sample_batch(*model_, src, plan, ref_len)) hyps.push_back(vocab_.decode(r.tokens));
    }
    DevResult out;
    out.report = seqdiff::evaluate(sources, refs, hyps);
    out.length_accuracy = n ? static_cast<double>(length_hits) / static_cast<double>(n) : 0.0;
    return out;
}

}  // namespace seqdiff
