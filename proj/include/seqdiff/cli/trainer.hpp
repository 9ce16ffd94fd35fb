#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "seqdiff/cli/checkpoint.hpp"
#include "seqdiff/cli/run_config.hpp"
#include "seqdiff/core/optim.hpp"
#include "seqdiff/data/corpus.hpp"
#include "seqdiff/data/vocab.hpp"
#include "seqdiff/eval/report.hpp"
#include "seqdiff/model/model.hpp"

namespace seqdiff {

using TrainModel = Seq2SeqModel<float>;

struct StepLog {
    long step = 0;  // steps completed after this one
    double total = 0.0, vb = 0.0, cls = 0.0, ce = 0.0, length = 0.0;
    double lr = 0.0;
    Index masked = 0;
};

struct DevResult {
    EvalReport report;
    double length_accuracy = 0.0;  // top-1 length prediction on the dev examples
};

/// Owns model, optimizer state and the deterministic batch stream. The batch
/// and noise of step k depend only on (seed, k), so a resumed run continues
/// exactly where the saved one stopped.
class Trainer {
public:
    Trainer(RunConfig config, Vocab vocab, std::vector<Example> train);

    /// Restores model, optimizer and step count. `train` may be empty when no
    /// further steps are taken. `config` replaces the stored configuration;
    /// it must describe the same parameter shapes.
    static Trainer from_checkpoint(const Checkpoint& ckpt, std::vector<Example> train = {},
                                   const std::optional<RunConfig>& config = std::nullopt);
    static RunConfig checkpoint_config(const Checkpoint& ckpt);
    static Vocab checkpoint_vocab(const Checkpoint& ckpt);

    /// One optimizer step. Throws NumericError on a non-finite loss before any
    /// parameter changes.
    StepLog step();
    long steps_done() const { return optim_->step; }

    const TrainModel& model() const { return *model_; }
    TrainModel& model() { return *model_; }
    const Vocab& vocab() const { return vocab_; }
    const RunConfig& config() const { return config_; }

    Checkpoint checkpoint() const;

    /// Samples every dev pair (up to `limit`, 0 for all) and scores it.
    DevResult evaluate(const std::vector<Pair>& dev, int steps, LengthSource length, Index limit = 0,
                       std::uint64_t seed = 0) const;

private:
    const Batch& batch_for(long step);

    RunConfig config_;
    Vocab vocab_;
    std::unique_ptr<TrainModel> model_;
    std::unique_ptr<OptimState<float>> optim_;
    std::vector<Example> train_;
    std::vector<Batch> epoch_batches_;
    long cached_epoch_ = -1;
};

/// Splitmix-style mixing for per-step seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);

}  // namespace seqdiff
