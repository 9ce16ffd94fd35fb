#include "seqdiff/cli/run_config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "seqdiff/core/errors.hpp"

namespace seqdiff {

namespace {

struct Field {
    const char* name;
    std::function<std::string()> get;
    std::function<void(const std::string&)> set;
};

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

template <typename Int>
Int parse_int(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    long long x = 0;
    try {
        x = std::stoll(v, &used);
    } catch (const std::exception&) {
        throw ConfigError(key, "expected an integer, got '" + v + "'");
    }
    if (used != v.size()) throw ConfigError(key, "expected an integer, got '" + v + "'");
    return static_cast<Int>(x);
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    unsigned long long x = 0;
    try {
        if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
        x = std::stoull(v, &used);
    } catch (const std::exception&) {
        throw ConfigError(key, "expected a nonnegative integer, got '" + v + "'");
    }
    if (used != v.size()) throw ConfigError(key, "expected a nonnegative integer, got '" + v + "'");
    return x;
}

double parse_double(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    double x = 0;
    try {
        x = std::stod(v, &used);
    } catch (const std::exception&) {
        throw ConfigError(key, "expected a number, got '" + v + "'");
    }
    if (used != v.size()) throw ConfigError(key, "expected a number, got '" + v + "'");
    return x;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError(key, "expected true or false, got '" + v + "'");
}

std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::vector<Field> fields(RunConfig& c) {
    std::vector<Field> f;
    auto integer = [&f](const char* name, auto& slot) {
        using T = std::decay_t<decltype(slot)>;
        f.push_back({name, [&slot] { return std::to_string(slot); },
                     [&slot, name](const std::string& v) { slot = parse_int<T>(name, v); }});
    };
    auto real = [&f](const char* name, double& slot) {
        f.push_back({name, [&slot] { return fmt_double(slot); },
                     [&slot, name](const std::string& v) { slot = parse_double(name, v); }});
    };
    auto flag = [&f](const char* name, bool& slot) {
        f.push_back({name, [&slot] { return std::string(slot ? "true" : "false"); },
                     [&slot, name](const std::string& v) { slot = parse_bool(name, v); }});
    };
    auto text = [&f](const char* name, std::string& slot) {
        f.push_back({name, [&slot] { return slot; }, [&slot](const std::string& v) { slot = v; }});
    };

    f.push_back({"backbone", [&c] { return std::string(to_string(c.backbone)); },
                 [&c](const std::string& v) { c.backbone = parse_backbone(v); }});
    integer("encoder_layers", c.encoder_layers);
    integer("decoder_layers", c.decoder_layers);
    integer("width", c.width);
    integer("heads", c.heads);
    integer("ffn_hidden", c.ffn_hidden);
    integer("state", c.state);
    integer("expand", c.expand);
    integer("max_source_len", c.max_source_len);
    integer("max_target_len", c.max_target_len);
    f.push_back({"scan", [&c] { return std::string(to_string(c.scan)); },
                 [&c](const std::string& v) { c.scan = parse_scan(v); }});
    f.push_back({"schedule", [&c] { return std::string(to_string(c.schedule)); },
                 [&c](const std::string& v) { c.schedule = parse_schedule_kind(v); }});
    integer("T", c.T);
    integer("S", c.S);
    flag("disable_similarity_loss", c.disable_similarity_loss);
    flag("no_detach_target", c.no_detach_target);
    real("cls_weight", c.cls_weight);
    integer("batch_size", c.batch_size);
    integer("steps", c.steps);
    real("lr", c.lr);
    real("warmup_start", c.warmup_start);
    integer("warmup_steps", c.warmup_steps);
    real("weight_decay", c.weight_decay);
    real("beta1", c.beta1);
    real("beta2", c.beta2);
    real("clip_norm", c.clip_norm);
    text("train_path", c.train_path);
    text("dev_path", c.dev_path);
    text("vocab_path", c.vocab_path);
    text("checkpoint", c.checkpoint);
    integer("min_count", c.min_count);
    integer("dev_limit", c.dev_limit);
    integer("log_every", c.log_every);
    integer("eval_every", c.eval_every);
    integer("save_every", c.save_every);
    f.push_back({"eval_length", [&c] { return std::string(c.eval_length == LengthSource::reference ? "ref" : "predict"); },
                 [&c](const std::string& v) {
                     if (v == "ref" || v == "reference") c.eval_length = LengthSource::reference;
                     else if (v == "predict" || v == "predicted") c.eval_length = LengthSource::predicted;
                     else throw ConfigError("eval_length", "expected ref or predict, got '" + v + "'");
                 }});
    f.push_back({"seed", [&c] { return std::to_string(c.seed); },
                 [&c](const std::string& v) { c.seed = parse_u64("seed", v); }});
    return f;
}

}  // namespace

const std::vector<std::string>& RunConfig::keys() {
    static const std::vector<std::string> names = [] {
        RunConfig c;
        std::vector<std::string> out;
        for (const auto& f : fields(c)) out.push_back(f.name);
        return out;
    }();
    return names;
}

void RunConfig::set(const std::string& key, const std::string& value) {
    for (auto& f : fields(*this)) {
        if (key == f.name) {
            f.set(value);
            return;
        }
    }
    throw ConfigError(key, "unknown configuration key");
}

std::string RunConfig::get(const std::string& key) const {
    for (auto& f : fields(const_cast<RunConfig&>(*this))) {
        if (key == f.name) return f.get();
    }
    throw ConfigError(key, "unknown configuration key");
}

void RunConfig::apply_text(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    int number = 0;
    while (std::getline(in, line)) {
        ++number;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("line " + std::to_string(number), "expected key = value, got '" + line + "'");
        }
        set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
}

void RunConfig::apply_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config", "cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    apply_text(buf.str());
}

void RunConfig::validate() const {
    if (backbone == Backbone::mamba && schedule == ScheduleKind::semantic) {
        throw ConfigError("schedule",
                          "semantic noising needs [CLS] attention scores, but the mamba backbone has no attention "
                          "mechanism; use schedule = uniform or backbone = transformer");
    }
    if (T < 1) throw ConfigError("T", "must be at least 1");
    if (S < 1 || S > T) throw ConfigError("S", "must satisfy 1 <= S <= T");
    if (batch_size < 1) throw ConfigError("batch_size", "must be positive");
    if (steps < 0) throw ConfigError("steps", "must be nonnegative");
    if (!(lr > 0.0)) throw ConfigError("lr", "must be positive");
    if (warmup_steps < 0) throw ConfigError("warmup_steps", "must be nonnegative");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("beta1", "must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("beta2", "must lie in [0, 1)");
    if (clip_norm < 0.0) throw ConfigError("clip_norm", "must be nonnegative");
    if (cls_weight < 0.0) throw ConfigError("cls_weight", "must be nonnegative");
    if (min_count < 1) throw ConfigError("min_count", "must be positive");
    if (log_every < 1) throw ConfigError("log_every", "must be positive");
    if (eval_every < 0) throw ConfigError("eval_every", "must be nonnegative");
    if (save_every < 0) throw ConfigError("save_every", "must be nonnegative");
    model_config(token::kReserved + 1).validate();
}

ModelConfig RunConfig::model_config(Index vocab_size) const {
    ModelConfig m;
    m.backbone = backbone;
    m.encoder_layers = encoder_layers;
    m.decoder_layers = decoder_layers;
    m.width = width;
    m.heads = heads;
    m.ffn_hidden = ffn_hidden;
    m.state = state;
    m.expand = expand;
    m.vocab_size = vocab_size;
    m.max_source_len = max_source_len;
    m.max_target_len = max_target_len;
    m.T = T;
    m.scan = scan;
    return m;
}

LossOptions RunConfig::loss_options() const {
    LossOptions o;
    o.kind = schedule;
    o.T = T;
    o.disable_similarity_loss = disable_similarity_loss;
    o.no_detach_target = no_detach_target;
    o.cls_weight = cls_weight;
    return o;
}

AdamWConfig RunConfig::optimizer() const {
    AdamWConfig o;
    o.beta1 = beta1;
    o.beta2 = beta2;
    o.weight_decay = weight_decay;
    o.clip_norm = clip_norm;
    o.lr = {lr, warmup_start, warmup_steps};
    return o;
}

nlohmann::json RunConfig::to_json() const {
    nlohmann::json doc = nlohmann::json::object();
    for (const auto& k : keys()) doc[k] = get(k);
    return doc;
}

RunConfig RunConfig::from_json(const nlohmann::json& doc) {
    if (!doc.is_object()) throw ConfigError("config", "expected a JSON object");
    RunConfig c;
    for (const auto& [k, v] : doc.items()) {
        if (!v.is_string()) throw ConfigError(k, "expected a string value");
        c.set(k, v.get<std::string>());
    }
    return c;
}

}  // namespace seqdiff
