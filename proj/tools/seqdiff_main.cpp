#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <sstream>

#include "seqdiff/cli/checkpoint.hpp"
#include "seqdiff/cli/run_config.hpp"
#include "seqdiff/cli/trainer.hpp"
#include "seqdiff/data/corpus.hpp"
#include "seqdiff/eval/bench.hpp"
#include "seqdiff/eval/metrics.hpp"
#include "seqdiff/eval/report.hpp"
#include "seqdiff/sampler/sampler.hpp"

using namespace seqdiff;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

// Config file plus per-key flags, shared by every subcommand that builds a
// RunConfig.
struct ConfigOptions {
    std::string file;
    std::map<std::string, std::string> overrides;

    void attach(CLI::App* app) {
        app->add_option("--config", file, "key = value configuration file");
        for (const auto& key : RunConfig::keys()) {
            app->add_option("--" + key, overrides[key], "override " + key);
        }
    }

    void apply(RunConfig& c, const CLI::App* app) const {
        for (const auto& key : RunConfig::keys()) {
            if (app->count("--" + key)) c.set(key, overrides.at(key));
        }
    }

    RunConfig build(const CLI::App* app) const {
        RunConfig c;
        if (!file.empty()) c.apply_file(file);
        apply(c, app);
        return c;
    }
};

std::vector<Pair> read_pairs(const std::string& path) {
    auto loaded = load_jsonl(path);
    for (const auto& e : loaded.errors) std::cerr << "warning: " << path << ":" << e.line << ": " << e.message << "\n";
    if (!loaded.errors.empty()) std::cerr << "warning: skipped " << loaded.errors.size() << " malformed lines\n";
    return std::move(loaded.pairs);
}

std::vector<Example> to_examples(const Vocab& vocab, const std::vector<Pair>& pairs, const RunConfig& c) {
    std::vector<Example> out;
    const Limits limits{c.max_source_len, c.max_target_len};
    long truncated = 0;
    for (const auto& p : pairs) {
        out.push_back(make_example(vocab, p, limits));
        const auto src = vocab.encode(p.source).size() + 2;
        const auto tgt = vocab.encode(p.target).size();
        truncated += static_cast<Index>(src) > c.max_source_len || static_cast<Index>(tgt) > c.max_target_len;
    }
    if (truncated) std::cerr << "warning: truncated " << truncated << " pairs to the configured maxima\n";
    return out;
}

void save_atomically(const Trainer& trainer, const std::string& path) {
    if (path.empty()) return;
    save_checkpoint(path, trainer.checkpoint());
}

nlohmann::json dev_line(const Trainer& t, const DevResult& r) {
    return {{"step", t.steps_done()},       {"dev_bleu", r.report.bleu},      {"dev_rouge1", r.report.rouge1},
            {"dev_rouge2", r.report.rouge2}, {"dev_rougeL", r.report.rougeL}, {"dev_exact", r.report.exact_match},
            {"dev_length_acc", r.length_accuracy}};
}

int cmd_train(const ConfigOptions& opts, const CLI::App* app, bool resume) {
    RunConfig c = opts.build(app);
    std::optional<Checkpoint> ckpt;
    if (resume && !c.checkpoint.empty() && std::filesystem::exists(c.checkpoint)) {
        ckpt = load_checkpoint(c.checkpoint);
        RunConfig stored = Trainer::checkpoint_config(*ckpt);
        if (!opts.file.empty()) stored.apply_file(opts.file);
        opts.apply(stored, app);
        c = stored;
    }
    c.validate();
    if (c.train_path.empty()) throw ConfigError("train_path", "required for training");
    const auto train_pairs = read_pairs(c.train_path);
    if (train_pairs.empty()) throw DataError("no usable training pairs in " + c.train_path);
    std::vector<Pair> dev;
    if (!c.dev_path.empty()) dev = read_pairs(c.dev_path);

    std::unique_ptr<Trainer> trainer;
    if (ckpt) {
        const Vocab vocab = Trainer::checkpoint_vocab(*ckpt);
        trainer = std::make_unique<Trainer>(Trainer::from_checkpoint(*ckpt, to_examples(vocab, train_pairs, c), c));
        std::cerr << "resumed from " << c.checkpoint << " at step " << trainer->steps_done() << "\n";
    } else {
        Vocab vocab;
        if (!c.vocab_path.empty() && std::filesystem::exists(c.vocab_path)) {
            vocab = Vocab::load(c.vocab_path);
        } else {
            std::vector<std::string> corpus;
            for (const auto& p : train_pairs) {
                corpus.push_back(p.source);
                corpus.push_back(p.target);
            }
            vocab = Vocab::build(corpus, c.min_count);
            if (!c.vocab_path.empty()) vocab.save(c.vocab_path);
        }
        trainer = std::make_unique<Trainer>(c, vocab, to_examples(vocab, train_pairs, c));
    }

    while (trainer->steps_done() < c.steps) {
        StepLog log;
        try {
            log = trainer->step();
        } catch (const NumericError&) {
            if (!c.checkpoint.empty()) std::cerr << "keeping last good checkpoint " << c.checkpoint << "\n";
            throw;
        }
        if (log.step % c.log_every == 0 || log.step == c.steps) {
            nlohmann::json line = {{"step", log.step}, {"loss", log.total}, {"vb", log.vb},       {"cls", log.cls},
                                   {"ce", log.ce},     {"length", log.length}, {"lr", log.lr}, {"masked", log.masked}};
            std::cout << line.dump() << std::endl;
        }
        if (!dev.empty() && c.eval_every > 0 && log.step % c.eval_every == 0) {
            auto r = trainer->evaluate(dev, c.S, c.eval_length, c.dev_limit, c.seed);
            std::cout << dev_line(*trainer, r).dump() << std::endl;
        }
        if (c.save_every > 0 && log.step % c.save_every == 0) save_atomically(*trainer, c.checkpoint);
    }
    save_atomically(*trainer, c.checkpoint);
    return 0;
}

struct SampleOptions {
    std::string checkpoint;
    std::string input = "-";
    std::string length = "predict";
    std::string vocab;
    int steps = 0;
    std::uint64_t seed = 0;
    double temperature = 0.0;
    bool trace = false;
};

Trainer load_for_inference(const std::string& path) {
    if (path.empty()) throw ConfigError("checkpoint", "required");
    return Trainer::from_checkpoint(load_checkpoint(path));
}

LengthSource parse_length(const std::string& s) {
    if (s == "ref" || s == "reference") return LengthSource::reference;
    if (s == "predict" || s == "predicted") return LengthSource::predicted;
    throw ConfigError("length", "expected ref or predict, got '" + s + "'");
}

int cmd_sample(const SampleOptions& o) {
    const auto trainer = load_for_inference(o.checkpoint);
    const auto& c = trainer.config();
    if (!o.vocab.empty() && !(Vocab::load(o.vocab) == trainer.vocab())) {
        throw DataError("vocab mismatch: " + o.vocab + " differs from the checkpoint vocabulary");
    }
    if (trainer.vocab().size() != trainer.model().config().vocab_size) {
        throw DataError("vocab mismatch: checkpoint vocabulary does not fit the model");
    }
    SamplePlan plan;
    plan.steps = o.steps > 0 ? o.steps : c.S;
    plan.length = parse_length(o.length);
    plan.seed = o.seed;
    plan.temperature = o.temperature;
    plan.trace = o.trace;
    if (plan.steps > c.T) throw ConfigError("steps", "must not exceed T = " + std::to_string(c.T));

    std::ifstream file;
    if (o.input != "-") {
        file.open(o.input);
        if (!file) throw DataError("cannot open " + o.input);
    }
    std::istream& in = o.input == "-" ? std::cin : file;
    const Limits limits{c.max_source_len, c.max_target_len};
    std::string line;
    long number = 0;
    while (std::getline(in, line)) {
        ++number;
        Pair pair{line, ""};
        bool has_target = false;
        auto doc = nlohmann::json::parse(line, nullptr, false);
        if (!doc.is_discarded() && doc.is_object() && doc.contains("source") && doc["source"].is_string()) {
            pair.source = doc["source"].get<std::string>();
            if (doc.contains("target") && doc["target"].is_string()) {
                pair.target = doc["target"].get<std::string>();
                has_target = true;
            }
        }
        if (plan.length == LengthSource::reference && !has_target) {
            throw DataError("line " + std::to_string(number) + ": --length ref needs a JSON target");
        }
        const auto ex = make_example(trainer.vocab(), pair, limits);
        plan.seed = mix_seed(o.seed, static_cast<std::uint64_t>(number));
        auto r = sample_sequence(trainer.model(), ex.source, plan, static_cast<Index>(ex.target.size()));
        if (r.empty_length) std::cerr << "warning: line " << number << ": empty target length\n";
        if (o.trace) {
            for (const auto& step : r.trace) {
                std::cerr << "# line " << number << " t=" << step.t << ": " << trainer.vocab().decode(step.canvas)
                          << "\n";
            }
        }
        std::cout << trainer.vocab().decode(r.tokens) << std::endl;
    }
    return 0;
}

struct EvalOptions {
    std::string checkpoint;
    std::string data;
    std::string length = "predict";
    int steps = 0;
    Index limit = 0;
    std::uint64_t seed = 0;
};

int cmd_eval(const EvalOptions& o) {
    const auto trainer = load_for_inference(o.checkpoint);
    const auto& c = trainer.config();
    if (o.data.empty()) throw ConfigError("data", "required");
    const auto pairs = read_pairs(o.data);
    if (pairs.empty()) throw ConfigError("data", "dataset " + o.data + " has no usable pairs");
    const int steps = o.steps > 0 ? o.steps : c.S;
    if (steps > c.T) throw ConfigError("steps", "must not exceed T = " + std::to_string(c.T));
    auto result = trainer.evaluate(pairs, steps, parse_length(o.length), o.limit, o.seed);
    auto report = result.report;
    if (c.backbone == Backbone::transformer) {
        std::vector<std::vector<double>> scores;
        const Limits limits{c.max_source_len, c.max_target_len};
        const std::size_t n = o.limit > 0 ? std::min(pairs.size(), static_cast<std::size_t>(o.limit)) : pairs.size();
        NoGradGuard no_grad;
        for (std::size_t i = 0; i < n; ++i) {
            auto ex = make_example(trainer.vocab(), pairs[i], limits);
            if (ex.target.empty()) continue;
            scores.push_back(trainer.model().target_semantics({ex.target}).scores.front());
        }
        report.entropy = schedule_entropy(scores);
    }
    auto doc = report.to_json();
    doc["length_accuracy"] = result.length_accuracy;
    doc["steps"] = steps;
    std::cout << doc.dump(2) << std::endl;
    return 0;
}

struct BenchOptions {
    std::string lengths = "256,512,1024,2048";
    std::string steps = "2,10";
    std::string csv;
    Index runs = 20;
    Index width = 32;
    Index heads = 2;
    Index state = 8;
    Index encoder_layers = 1;
    Index decoder_layers = 2;
    Index vocab = 64;
    std::uint64_t seed = 0;
};

template <typename T>
std::vector<T> parse_list(const std::string& text, const char* field, T min_value = 1) {
    std::vector<T> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            out.push_back(static_cast<T>(std::stoll(item)));
        } catch (const std::exception&) {
            throw ConfigError(field, "bad list entry '" + item + "'");
        }
        if (out.back() < min_value) throw ConfigError(field, "entries must be at least " + std::to_string(min_value));
    }
    if (out.empty()) throw ConfigError(field, "empty list");
    return out;
}

int cmd_bench(const BenchOptions& o) {
    const auto lengths = parse_list<Index>(o.lengths, "lengths");
    const auto steps = parse_list<int>(o.steps, "steps");
    ModelConfig m;
    m.encoder_layers = o.encoder_layers;
    m.decoder_layers = o.decoder_layers;
    m.width = o.width;
    m.heads = o.heads;
    m.state = o.state;
    m.vocab_size = o.vocab;
    m.max_source_len = m.max_target_len = std::max<Index>(2, *std::max_element(lengths.begin(), lengths.end()));
    m.T = std::max(50, *std::max_element(steps.begin(), steps.end()));
    m.validate();
    TrainModel transformer(m, o.seed);
    m.backbone = Backbone::mamba;
    TrainModel mamba(m, o.seed);
    TimingOptions t;
    t.runs = o.runs;
    auto report = speed_bench<TrainModel>({{"transformer", &transformer}, {"mamba", &mamba}}, lengths, steps, t);
    if (o.csv.empty()) {
        report.write_csv(std::cout);
    } else {
        std::ofstream out(o.csv);
        if (!out) throw DataError("cannot write " + o.csv);
        report.write_csv(out);
    }
    return 0;
}

struct TraceOptions {
    std::string checkpoint;
    std::string data;
    std::string t_grid;
    Index count = 3;
    std::uint64_t seed = 0;
};

int cmd_schedule_trace(const TraceOptions& o) {
    const auto trainer = load_for_inference(o.checkpoint);
    const auto& c = trainer.config();
    if (o.data.empty()) throw ConfigError("data", "required");
    std::vector<int> grid;
    if (o.t_grid.empty()) {
        for (int t = 0; t <= c.T; t += std::max(1, c.T / 10)) grid.push_back(t);
        if (grid.back() != c.T) grid.push_back(c.T);
    } else {
        grid = parse_list<int>(o.t_grid, "t_grid", 0);
        for (int t : grid) {
            if (t > c.T) throw ConfigError("t_grid", "step " + std::to_string(t) + " exceeds T");
        }
    }
    const bool semantic = c.schedule == ScheduleKind::semantic && c.backbone == Backbone::transformer;
    if (!semantic) std::cout << "notice: uniform-schedule checkpoint; traces use the uniform schedule\n";
    const auto pairs = read_pairs(o.data);
    const Limits limits{c.max_source_len, c.max_target_len};
    std::mt19937_64 rng(o.seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const auto& vocab = trainer.vocab();
    for (std::size_t k = 0; k < pairs.size() && static_cast<Index>(k) < o.count; ++k) {
        const auto ex = make_example(vocab, pairs[k], limits);
        ScheduleSpec spec = ScheduleSpec::uniform(c.T);
        if (semantic) {
            NoGradGuard no_grad;
            spec = ScheduleSpec::semantic(c.T, trainer.model().target_semantics({ex.target}).scores.front());
        }
        // One uniform per position shared across rows, so a position masked at t
        // stays masked at every later t.
        std::vector<double> draw;
        for (std::size_t i = 0; i < ex.target.size(); ++i) draw.push_back(u(rng));
        std::cout << "example " << k << ": " << vocab.decode(ex.target) << "\n";
        if (semantic) {
            std::ostringstream row;
            row.precision(2);
            row << std::fixed;
            for (double a : spec.salience) row << ' ' << a;
            std::cout << "  scores:" << row.str() << "\n";
        }
        for (int t : grid) {
            std::vector<Index> canvas = ex.target;
            for (std::size_t i = 0; i < canvas.size(); ++i) {
                if (draw[i] < mask_prob(spec, t, static_cast<Index>(i))) canvas[i] = token::kMask;
            }
            std::cout << "  t=" << t << ": " << vocab.decode(canvas) << "\n";
        }
    }
    return 0;
}

struct SynthOptions {
    std::string task = "salient";
    Index n = 1000;
    std::uint64_t seed = 0;
    SynthSpec spec;
};

int cmd_synth(const SynthOptions& o) {
    SynthSpec spec = o.spec;
    if (o.task == "salient") spec.task = SynthTask::salient;
    else if (o.task == "copy") spec.task = SynthTask::copy;
    else throw ConfigError("task", "expected salient or copy");
    for (const auto& p : synth_task_generate(o.n, o.seed, spec)) {
        std::cout << nlohmann::json{{"source", p.source}, {"target", p.target}}.dump() << "\n";
    }
    return 0;
}

template <typename F>
int guarded(F&& f) {
    try {
        return f();
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const CorruptFileError& e) {
        std::cerr << "corrupt file: " << e.what() << "\n";
        return kExitData;
    } catch (const VersionError& e) {
        std::cerr << "version error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Discrete diffusion sequence-to-sequence toolkit"};
    app.require_subcommand(1);

    ConfigOptions train_opts;
    bool resume = false;
    auto* train = app.add_subcommand("train", "train a model and write checkpoints");
    train_opts.attach(train);
    train->add_flag("--resume", resume, "continue from the checkpoint if it exists");

    SampleOptions sample_opts;
    auto* sample = app.add_subcommand("sample", "generate one line per input line");
    sample->add_option("--checkpoint", sample_opts.checkpoint)->required();
    sample->add_option("--input", sample_opts.input, "input file, - for stdin");
    sample->add_option("--steps", sample_opts.steps, "inference steps, default S from the checkpoint");
    sample->add_option("--length", sample_opts.length, "ref or predict");
    sample->add_option("--seed", sample_opts.seed);
    sample->add_option("--temperature", sample_opts.temperature);
    sample->add_option("--vocab", sample_opts.vocab, "vocab file that must match the checkpoint");
    sample->add_flag("--trace", sample_opts.trace, "print per-step canvases to stderr");

    EvalOptions eval_opts;
    auto* eval = app.add_subcommand("eval", "score a dataset and print a JSON report");
    eval->add_option("--checkpoint", eval_opts.checkpoint)->required();
    eval->add_option("--data", eval_opts.data)->required();
    eval->add_option("--steps", eval_opts.steps);
    eval->add_option("--length", eval_opts.length, "ref or predict");
    eval->add_option("--limit", eval_opts.limit);
    eval->add_option("--seed", eval_opts.seed);

    BenchOptions bench_opts;
    auto* bench = app.add_subcommand("bench", "decoding speed grid as CSV");
    bench->add_option("--lengths", bench_opts.lengths);
    bench->add_option("--steps", bench_opts.steps);
    bench->add_option("--runs", bench_opts.runs);
    bench->add_option("--width", bench_opts.width);
    bench->add_option("--heads", bench_opts.heads);
    bench->add_option("--state", bench_opts.state);
    bench->add_option("--encoder_layers", bench_opts.encoder_layers);
    bench->add_option("--decoder_layers", bench_opts.decoder_layers);
    bench->add_option("--vocab_size", bench_opts.vocab);
    bench->add_option("--seed", bench_opts.seed);
    bench->add_option("--csv", bench_opts.csv, "write CSV here instead of stdout");

    TraceOptions trace_opts;
    auto* trace = app.add_subcommand("schedule-trace", "forward masking over t for dataset targets");
    trace->add_option("--checkpoint", trace_opts.checkpoint)->required();
    trace->add_option("--data", trace_opts.data)->required();
    trace->add_option("--t-grid", trace_opts.t_grid, "comma-separated steps");
    trace->add_option("--count", trace_opts.count);
    trace->add_option("--seed", trace_opts.seed);

    SynthOptions synth_opts;
    auto* synth = app.add_subcommand("synth", "write a synthetic JSONL dataset to stdout");
    synth->add_option("--task", synth_opts.task, "salient or copy");
    synth->add_option("--n", synth_opts.n);
    synth->add_option("--seed", synth_opts.seed);
    synth->add_option("--min-records", synth_opts.spec.min_records);
    synth->add_option("--max-records", synth_opts.spec.max_records);
    synth->add_option("--min-salient", synth_opts.spec.min_salient);
    synth->add_option("--max-salient", synth_opts.spec.max_salient);
    synth->add_option("--keys", synth_opts.spec.keys);
    synth->add_option("--values", synth_opts.spec.values);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    if (*train) return guarded([&] { return cmd_train(train_opts, train, resume); });
    if (*sample) return guarded([&] { return cmd_sample(sample_opts); });
    if (*eval) return guarded([&] { return cmd_eval(eval_opts); });
    if (*bench) return guarded([&] { return cmd_bench(bench_opts); });
    if (*trace) return guarded([&] { return cmd_schedule_trace(trace_opts); });
    if (*synth) return guarded([&] { return cmd_synth(synth_opts); });
    return 1;
}
