// SPDX-License-Identifier: Apache-2.0
#include "unisd/runner.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include "unisd/errors.hpp"

namespace unisd {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::io, "cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const fs::path& path, const std::string& contents) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".part";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error(ErrorKind::io, "cannot write " + tmp.string());
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        if (!out) throw Error(ErrorKind::io, "short write to " + tmp.string());
    }
    fs::rename(tmp, path);
}

// ---------------------------------------------------------------- config

namespace {

bool is_non_negative_integer(const json& v) {
    return v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0);
}

class Section {
public:
    Section(const json& doc, std::string name) : name_(std::move(name)) {
        if (doc.contains(name_)) {
            if (!doc.at(name_).is_object()) throw ConfigError("'" + name_ + "' must be an object");
            obj_ = &doc.at(name_);
        }
    }
    Section(const json* obj, std::string name) : name_(std::move(name)), obj_(obj) {}

    void only(std::initializer_list<const char*> keys) const {
        if (!obj_) return;
        for (const auto& [k, _] : obj_->items()) {
            bool known = false;
            for (const char* allowed : keys) known = known || k == allowed;
            if (!known) throw ConfigError("unknown key '" + path(k) + "'");
        }
    }

    void get(const char* key, int& out) const {
        if (const json* v = find(key)) {
            if (!v->is_number_integer()) throw ConfigError("'" + path(key) + "' must be an integer");
            const auto x = v->get<long long>();
            if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) {
                throw ConfigError("'" + path(key) + "' is out of range");
            }
            out = static_cast<int>(x);
        }
    }
    void get(const char* key, std::uint64_t& out) const {
        if (const json* v = find(key)) {
            if (!is_non_negative_integer(*v)) throw ConfigError("'" + path(key) + "' must be a non-negative integer");
            out = v->get<std::uint64_t>();
        }
    }
    void get(const char* key, double& out) const {
        if (const json* v = find(key)) {
            if (!v->is_number()) throw ConfigError("'" + path(key) + "' must be a number");
            out = v->get<double>();
        }
    }
    void get(const char* key, bool& out) const {
        if (const json* v = find(key)) {
            if (!v->is_boolean()) throw ConfigError("'" + path(key) + "' must be a boolean");
            out = v->get<bool>();
        }
    }
    void get(const char* key, std::optional<double>& out) const {
        if (!obj_ || !obj_->contains(key)) return;
        const json& v = obj_->at(key);
        if (v.is_null()) {
            out.reset();
            return;
        }
        if (!v.is_number()) throw ConfigError("'" + path(key) + "' must be a number or null");
        out = v.get<double>();
    }
    template <typename Enum, typename Parse>
    void get_enum(const char* key, Enum& out, Parse parse) const {
        if (const json* v = find(key)) {
            if (!v->is_string()) throw ConfigError("'" + path(key) + "' must be a string");
            try {
                out = parse(v->get<std::string>());
            } catch (const ConfigError& e) {
                throw ConfigError("'" + path(key) + "': " + strip(e.what()));
            }
        }
    }

private:
    const json* find(const char* key) const {
        if (!obj_ || !obj_->contains(key)) return nullptr;
        return &obj_->at(key);
    }
    std::string path(const std::string& key) const { return name_.empty() ? key : name_ + "." + key; }
    static std::string strip(const std::string& msg) {
        const std::string prefix = "config error: ";
        return msg.rfind(prefix, 0) == 0 ? msg.substr(prefix.size()) : msg;
    }

    std::string name_;
    const json* obj_ = nullptr;
};

}  // namespace

ExperimentConfig parse_config(const json& doc) {
    if (!doc.is_object()) throw ConfigError("config must be a JSON object");
    Section top(&doc, "");
    top.only({"schema_version", "mode", "seed", "task", "arch", "base", "trainer", "distill", "agreement", "eval",
              "checkpoint_every"});
    int version = kConfigSchemaVersion;
    top.get("schema_version", version);
    if (version != kConfigSchemaVersion) {
        throw ConfigError("'schema_version' " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kConfigSchemaVersion) + ")");
    }
    Mode mode = Mode::unisd;
    top.get_enum("mode", mode, parse_mode);

    ExperimentConfig cfg;
    cfg.trainer = make_baseline_config(mode);
    TrainerConfig& t = cfg.trainer;
    top.get("seed", t.seed);
    top.get("checkpoint_every", t.checkpoint_every);

    Section task(doc, "task");
    task.only({"kind", "n_train", "n_eval"});
    task.get_enum("kind", cfg.task.kind, parse_task_kind);
    task.get("n_train", cfg.task.n_train);
    task.get("n_eval", cfg.task.n_eval);

    Section arch(doc, "arch");
    arch.only({"vocab", "d_model", "layers", "heads", "window", "mlp_ratio", "init_std"});
    arch.get("vocab", t.arch.vocab);
    arch.get("d_model", t.arch.d_model);
    arch.get("layers", t.arch.layers);
    arch.get("heads", t.arch.heads);
    arch.get("window", t.arch.window);
    arch.get("mlp_ratio", t.arch.mlp_ratio);
    arch.get("init_std", t.arch.init_std);

    Section base(doc, "base");
    base.only({"pretrain_steps", "learning_rate", "batch_size"});
    base.get("pretrain_steps", t.base.pretrain_steps);
    base.get("learning_rate", t.base.learning_rate);
    base.get("batch_size", t.base.batch_size);

    Section tr(doc, "trainer");
    tr.only({"learning_rate", "lr_schedule", "optimizer", "steps", "batch_size", "temperature", "max_completion"});
    tr.get("learning_rate", t.learning_rate);
    tr.get_enum("lr_schedule", t.lr_schedule, parse_lr_schedule);
    tr.get_enum("optimizer", t.optimizer, parse_optimizer);
    tr.get("steps", t.steps);
    tr.get("batch_size", t.batch_size);
    tr.get("temperature", t.temperature);
    tr.get("max_completion", t.max_completion);

    DistillConfig& d = t.distill;
    Section ds(doc, "distill");
    ds.only({"divergence", "alpha", "kappa", "margin_gamma", "lambda_aux", "lambda_feat", "use_ema", "beta",
             "contrast_enabled", "feat_enabled"});
    ds.get_enum("divergence", d.divergence, parse_divergence);
    ds.get("alpha", d.alpha);
    ds.get("kappa", d.kappa);
    ds.get("margin_gamma", d.margin_gamma);
    ds.get("lambda_aux", d.lambda_aux);
    ds.get("lambda_feat", d.lambda_feat);
    ds.get("use_ema", d.use_ema);
    ds.get("beta", d.beta);
    ds.get("contrast_enabled", d.contrast_enabled);
    ds.get("feat_enabled", d.feat_enabled);

    Section ag(doc, "agreement");
    ag.only({"enabled", "granularity", "statistic", "agree_gamma", "K", "strategy"});
    ag.get("enabled", d.agreement.enabled);
    ag.get_enum("granularity", d.agreement.granularity, parse_granularity);
    ag.get_enum("statistic", d.agreement.statistic, parse_statistic);
    ag.get("agree_gamma", d.agreement.agree_gamma);
    ag.get("K", d.agreement.K);
    ag.get_enum("strategy", d.agreement.strategy, parse_context_strategy);

    Section ev(doc, "eval");
    ev.only({"every", "examples", "temperature", "samples"});
    ev.get("every", t.eval_every);
    ev.get("examples", t.eval_examples);
    ev.get("temperature", t.eval_temperature);
    ev.get("samples", t.eval_samples);

    if (cfg.task.n_train < 1) throw ConfigError("'task.n_train' must be >= 1");
    if (cfg.task.n_eval < 1) throw ConfigError("'task.n_eval' must be >= 1");
    if (t.arch.vocab != Vocab::standard().size()) {
        throw ConfigError("'arch.vocab' must equal the tokenizer size " + std::to_string(Vocab::standard().size()));
    }
    validate(t);
    return cfg;
}

ExperimentConfig parse_config_text(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    return parse_config(doc);
}

ExperimentConfig load_config(const fs::path& path) {
    std::string text;
    try {
        text = read_file(path);
    } catch (const Error&) {
        throw ConfigError("cannot read config file " + path.string());
    }
    return parse_config_text(text);
}

ordered_json config_to_json(const ExperimentConfig& cfg) {
    const TrainerConfig& t = cfg.trainer;
    const DistillConfig& d = t.distill;
    ordered_json j;
    j["schema_version"] = kConfigSchemaVersion;
    j["mode"] = to_string(t.mode);
    j["seed"] = t.seed;
    j["task"] = {{"kind", to_string(cfg.task.kind)}, {"n_train", cfg.task.n_train}, {"n_eval", cfg.task.n_eval}};
    j["arch"] = {{"vocab", t.arch.vocab},   {"d_model", t.arch.d_model},     {"layers", t.arch.layers},
                 {"heads", t.arch.heads},   {"window", t.arch.window},       {"mlp_ratio", t.arch.mlp_ratio},
                 {"init_std", t.arch.init_std}};
    j["base"] = {{"pretrain_steps", t.base.pretrain_steps},
                 {"learning_rate", t.base.learning_rate},
                 {"batch_size", t.base.batch_size}};
    j["trainer"] = {{"learning_rate", t.learning_rate},
                    {"lr_schedule", to_string(t.lr_schedule)},
                    {"optimizer", to_string(t.optimizer)},
                    {"steps", t.steps},
                    {"batch_size", t.batch_size},
                    {"temperature", t.temperature},
                    {"max_completion", t.max_completion}};
    ordered_json dj;
    dj["divergence"] = to_string(d.divergence);
    dj["alpha"] = d.alpha;
    dj["kappa"] = d.kappa ? ordered_json(*d.kappa) : ordered_json(nullptr);
    dj["margin_gamma"] = d.margin_gamma;
    dj["lambda_aux"] = d.lambda_aux;
    dj["lambda_feat"] = d.lambda_feat;
    dj["use_ema"] = d.use_ema;
    dj["beta"] = d.beta;
    dj["contrast_enabled"] = d.contrast_enabled;
    dj["feat_enabled"] = d.feat_enabled;
    j["distill"] = dj;
    j["agreement"] = {{"enabled", d.agreement.enabled},
                      {"granularity", to_string(d.agreement.granularity)},
                      {"statistic", to_string(d.agreement.statistic)},
                      {"agree_gamma", d.agreement.agree_gamma},
                      {"K", d.agreement.K},
                      {"strategy", to_string(d.agreement.strategy)}};
    j["eval"] = {{"every", t.eval_every},
                 {"examples", t.eval_examples},
                 {"temperature", t.eval_temperature},
                 {"samples", t.eval_samples}};
    j["checkpoint_every"] = t.checkpoint_every;
    return j;
}

namespace {

std::string hex64(std::uint64_t v) {
    std::ostringstream ss;
    ss << std::hex << std::setw(16) << std::setfill('0') << v;
    return ss.str();
}

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
    return buf;
}

}  // namespace

std::string config_hash(const ExperimentConfig& cfg) { return hex64(fnv1a(config_to_json(cfg).dump())); }

std::pair<TaskDataset, TaskDataset> make_datasets(const ExperimentConfig& cfg) {
    return generate_splits(cfg.task.kind, cfg.task.n_train, cfg.task.n_eval, derive_seed(cfg.trainer.seed, "datasets"));
}

// ---------------------------------------------------------------- reports as JSON

ordered_json to_json(const EvalReport& r) {
    ordered_json j;
    j["step"] = r.step;
    j["accuracy"] = r.accuracy;
    j["fit_ppl"] = r.fit_infinite ? ordered_json(nullptr) : ordered_json(r.fit_ppl);
    j["fit_infinite"] = r.fit_infinite;
    j["retention_ppl"] = r.retention_ppl;
    j["retention_excluded"] = r.retention_excluded;
    j["mean_token_jsd"] = r.mean_token_jsd;
    j["jsd_histogram"] = r.jsd_histogram;
    j["n_examples"] = r.n_examples;
    j["seed"] = r.seed;
    j["jsd_profile"] = r.jsd_profile;
    j["base_lp_profile"] = r.base_lp_profile;
    return j;
}

EvalReport eval_report_from_json(const json& j) {
    EvalReport r;
    r.step = j.at("step").get<long>();
    r.accuracy = j.at("accuracy").get<double>();
    r.fit_infinite = j.at("fit_infinite").get<bool>();
    r.fit_ppl = r.fit_infinite ? std::numeric_limits<double>::infinity() : j.at("fit_ppl").get<double>();
    r.retention_ppl = j.at("retention_ppl").get<double>();
    r.retention_excluded = j.at("retention_excluded").get<long>();
    r.mean_token_jsd = j.at("mean_token_jsd").get<double>();
    r.jsd_histogram = j.at("jsd_histogram").get<std::vector<long>>();
    r.n_examples = j.at("n_examples").get<long>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.jsd_profile = j.at("jsd_profile").get<std::vector<double>>();
    r.base_lp_profile = j.at("base_lp_profile").get<std::vector<double>>();
    return r;
}

ordered_json to_json(const PairedComparison& p) {
    return {{"frac_lower_jsd", p.frac_lower_jsd}, {"frac_higher_base_lp", p.frac_higher_base_lp},
            {"mean_diff_jsd", p.mean_diff_jsd},   {"median_diff_jsd", p.median_diff_jsd},
            {"ties_jsd", p.ties_jsd},             {"ties_base_lp", p.ties_base_lp},
            {"n", p.n}};
}

// ---------------------------------------------------------------- runs

namespace {

ordered_json seed_table(const TrainerConfig& t) {
    return {{"experiment", t.seed},
            {"datasets", derive_seed(t.seed, "datasets")},
            {"base_init", derive_seed(t.seed, "base_init")},
            {"base_data", derive_seed(t.seed, "base_data")},
            {"rollout", derive_seed(t.seed, "rollout")},
            {"data_order", derive_seed(t.seed, "data")},
            {"eval", derive_seed(t.seed, "eval")}};
}

std::string step_name(long step) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "step-%06ld.ckpt", step);
    return buf;
}

}  // namespace

RunResult run_experiment(const ExperimentConfig& cfg, const fs::path& out_root, const std::string& run_id_override) {
    const std::string hash = config_hash(cfg);
    std::string run_id = run_id_override.empty() ? utc_timestamp() + "-" + hash : run_id_override;
    fs::create_directories(out_root);
    if (run_id_override.empty()) {
        const std::string stem = run_id;
        for (int i = 1; fs::exists(out_root / run_id) || fs::exists(out_root / (run_id + ".tmp")); ++i) {
            run_id = stem + "-" + std::to_string(i);
        }
    } else if (fs::exists(out_root / run_id)) {
        throw Error(ErrorKind::io, "run directory " + (out_root / run_id).string() + " already exists");
    }
    const fs::path tmp = out_root / (run_id + ".tmp");
    const fs::path final_dir = out_root / run_id;
    fs::remove_all(tmp);
    fs::create_directories(tmp / "checkpoints");
    fs::create_directories(tmp / "data");

    ordered_json rec_json;
    rec_json["run_id"] = run_id;
    rec_json["config_hash"] = hash;
    rec_json["config"] = config_to_json(cfg);
    rec_json["metrics_path"] = "metrics.jsonl";
    rec_json["provenance"] = {{"tool_version", kToolVersion}, {"seeds", seed_table(cfg.trainer)}};
    write_file(tmp / "config.json", config_to_json(cfg).dump(2) + "\n");

    RunResult result;
    result.run_id = run_id;
    result.dir = final_dir;
    try {
        const auto [train, eval] = make_datasets(cfg);
        write_file(tmp / "data" / "train.jsonl", to_jsonl(train));
        write_file(tmp / "data" / "eval.jsonl", to_jsonl(eval));

        RunRecord rec = run_training(cfg.trainer, train, &eval);

        std::string metrics;
        for (const auto& s : rec.steps) metrics += metrics_line(s) + "\n";
        write_file(tmp / "metrics.jsonl", metrics);

        ordered_json reports = ordered_json::array();
        for (const auto& r : rec.eval_reports) reports.push_back(to_json(r));
        write_file(tmp / "eval_reports.json", reports.dump(2) + "\n");

        ordered_json ckpts;
        save_checkpoint((tmp / "checkpoints" / "student.ckpt").string(), rec.student);
        ckpts["student"] = "checkpoints/student.ckpt";
        save_checkpoint((tmp / "checkpoints" / "base.ckpt").string(), rec.base_snapshot);
        ckpts["base_snapshot"] = "checkpoints/base.ckpt";
        if (rec.ema_teacher) {
            save_checkpoint((tmp / "checkpoints" / "ema.ckpt").string(), *rec.ema_teacher);
            ckpts["ema_teacher"] = "checkpoints/ema.ckpt";
        } else {
            ckpts["ema_teacher"] = nullptr;
        }
        ordered_json periodic = ordered_json::array();
        for (const auto& [step, params] : rec.checkpoints) {
            const std::string name = step_name(step);
            save_checkpoint((tmp / "checkpoints" / name).string(), params);
            periodic.push_back({{"step", step}, {"path", "checkpoints/" + name}});
        }
        ckpts["periodic"] = periodic;

        rec_json["checkpoints"] = ckpts;
        rec_json["eval_reports"] = reports;
        rec_json["health"] = to_string(rec.health);
        rec_json["steps"] = rec.steps.size();
        rec_json["skipped_steps"] = rec.skipped_steps;
        rec_json["view_teacher"] = rec.view_teacher;
        rec_json["base_fingerprint_before"] = hex64(rec.base_fingerprint_before);
        rec_json["base_fingerprint_after"] = hex64(rec.base_fingerprint_after);
        write_file(tmp / "run_record.json", rec_json.dump(2) + "\n");
        result.record = std::move(rec);
    } catch (const std::exception& e) {
        rec_json["health"] = to_string(Health::unhealthy);
        rec_json["error"] = e.what();
        write_file(tmp / "run_record.json", rec_json.dump(2) + "\n");
        fs::rename(tmp, final_dir);
        throw;
    }
    fs::rename(tmp, final_dir);
    return result;
}

// ---------------------------------------------------------------- sweeps

SweepSpec parse_sweep(const json& doc) {
    if (!doc.is_object()) throw ConfigError("sweep spec must be a JSON object");
    Section top(&doc, "");
    top.only({"base_config", "axes", "seeds", "cap"});
    SweepSpec spec;
    spec.base_config = doc.contains("base_config") ? doc.at("base_config") : json::object();
    if (!spec.base_config.is_object()) throw ConfigError("'base_config' must be an object");
    top.get("cap", spec.cap);
    if (spec.cap < 1) throw ConfigError("'cap' must be >= 1");
    if (doc.contains("seeds")) {
        if (!doc.at("seeds").is_array()) throw ConfigError("'seeds' must be an array");
        for (const auto& s : doc.at("seeds")) {
            if (!is_non_negative_integer(s)) throw ConfigError("'seeds' entries must be non-negative integers");
            spec.seeds.push_back(s.get<std::uint64_t>());
        }
    }
    if (spec.seeds.empty()) {
        std::uint64_t seed = 0;
        Section(&spec.base_config, "base_config").get("seed", seed);
        spec.seeds.push_back(seed);
    }
    if (doc.contains("axes")) {
        if (!doc.at("axes").is_object()) throw ConfigError("'axes' must be an object");
        for (const auto& [key, values] : doc.at("axes").items()) {
            if (!values.is_array() || values.empty()) throw ConfigError("'axes." + key + "' must be a non-empty array");
            if (key == "seed") throw ConfigError("'axes.seed' is not allowed; use 'seeds'");
            spec.axes.emplace_back(key, std::vector<json>(values.begin(), values.end()));
        }
    }
    std::size_t cells = spec.seeds.size();
    for (const auto& [key, values] : spec.axes) {
        cells *= values.size();
        if (cells > static_cast<std::size_t>(spec.cap)) break;
    }
    if (cells > static_cast<std::size_t>(spec.cap)) {
        throw ConfigError("sweep has more than cap=" + std::to_string(spec.cap) + " cells");
    }
    // every axis must name a schema key
    for (const auto& [key, values] : spec.axes) {
        json probe = spec.base_config;
        const auto dot = key.find('.');
        if (dot == std::string::npos) {
            probe[key] = values.front();
        } else {
            probe[key.substr(0, dot)][key.substr(dot + 1)] = values.front();
        }
        parse_config(probe);
    }
    return spec;
}

namespace {

json apply_override(json doc, const std::string& key, const json& value) {
    const auto dot = key.find('.');
    if (dot == std::string::npos) {
        doc[key] = value;
    } else {
        doc[key.substr(0, dot)][key.substr(dot + 1)] = value;
    }
    return doc;
}

void write_index(const fs::path& out_dir, const std::vector<SweepCell>& cells) {
    ordered_json idx;
    idx["cells"] = ordered_json::array();
    for (const auto& c : cells) {
        idx["cells"].push_back({{"index", c.index},
                                {"overrides", c.overrides},
                                {"seed", c.seed},
                                {"config_hash", c.config_hash},
                                {"run_id", c.run_id},
                                {"status", c.status},
                                {"error", c.error}});
    }
    write_file(out_dir / "sweep_index.json", idx.dump(2) + "\n");
}

}  // namespace

std::vector<SweepCell> run_sweep(const SweepSpec& spec, const fs::path& out_dir) {
    fs::create_directories(out_dir / "runs");
    std::map<std::string, std::string> done;  // config hash -> run id
    if (fs::exists(out_dir / "sweep_index.json")) {
        const json old = json::parse(read_file(out_dir / "sweep_index.json"));
        for (const auto& c : old.at("cells")) {
            const std::string status = c.at("status").get<std::string>();
            const std::string run_id = c.at("run_id").get<std::string>();
            if ((status == "completed" || status == "resumed") && fs::exists(out_dir / "runs" / run_id)) {
                done[c.at("config_hash").get<std::string>()] = run_id;
            }
        }
    }

    std::vector<json> grid{json::object()};
    for (const auto& [key, values] : spec.axes) {
        std::vector<json> next;
        for (const auto& partial : grid) {
            for (const auto& v : values) {
                json o = partial;
                o[key] = v;
                next.push_back(std::move(o));
            }
        }
        grid = std::move(next);
    }

    std::vector<SweepCell> cells;
    for (const auto& overrides : grid) {
        for (std::uint64_t seed : spec.seeds) {
            SweepCell cell;
            cell.index = static_cast<int>(cells.size());
            cell.overrides = overrides;
            cell.seed = seed;
            cells.push_back(std::move(cell));
        }
    }
    write_index(out_dir, cells);

    for (auto& cell : cells) {
        try {
            json doc = spec.base_config;
            for (const auto& [key, value] : cell.overrides.items()) doc = apply_override(doc, key, value);
            doc["seed"] = cell.seed;
            const ExperimentConfig cfg = parse_config(doc);
            cell.config_hash = config_hash(cfg);
            if (auto it = done.find(cell.config_hash); it != done.end()) {
                cell.run_id = it->second;
                cell.status = "resumed";
            } else {
                const RunResult r = run_experiment(cfg, out_dir / "runs");
                cell.run_id = r.run_id;
                cell.status = "completed";
                done[cell.config_hash] = r.run_id;
            }
        } catch (const std::exception& e) {
            cell.status = "failed";
            cell.error = e.what();
        }
        write_index(out_dir, cells);
    }
    return cells;
}

// ---------------------------------------------------------------- reports

ReportFormat parse_report_format(std::string_view s) {
    if (s == "table_csv") return ReportFormat::table_csv;
    if (s == "plotdata_json") return ReportFormat::plotdata_json;
    throw ConfigError("unsupported report format '" + std::string(s) + "'");
}

namespace {

struct LoadedRun {
    std::string run_id;
    ExperimentConfig config;
    std::string health;
    std::vector<EvalReport> reports;
    std::vector<long> loss_steps;
    std::vector<double> loss_total;
};

LoadedRun load_run(const fs::path& dir) {
    if (!fs::exists(dir / "run_record.json")) throw Error(ErrorKind::io, dir.string() + " is not a completed run directory");
    const json rec = json::parse(read_file(dir / "run_record.json"));
    LoadedRun r;
    r.run_id = rec.at("run_id").get<std::string>();
    r.config = parse_config(rec.at("config"));
    r.health = rec.at("health").get<std::string>();
    if (rec.contains("eval_reports")) {
        for (const auto& e : rec.at("eval_reports")) r.reports.push_back(eval_report_from_json(e));
    }
    if (fs::exists(dir / "metrics.jsonl")) {
        std::istringstream in(read_file(dir / "metrics.jsonl"));
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const json m = json::parse(line);
            r.loss_steps.push_back(m.at("step").get<long>());
            r.loss_total.push_back(m.at("loss").at("total").get<double>());
        }
    }
    return r;
}

std::string fmt(double v) {
    if (!std::isfinite(v)) return v > 0 ? "inf" : "nan";
    std::ostringstream ss;
    ss << std::setprecision(10) << v;
    return ss.str();
}

}  // namespace

std::string emit_report(const std::vector<fs::path>& run_dirs, ReportFormat format) {
    if (run_dirs.empty()) throw ConfigError("report needs at least one run directory");
    std::vector<LoadedRun> runs;
    for (const auto& d : run_dirs) runs.push_back(load_run(d));
    const LoadedRun& ref = runs.front();

    auto paired = [&](const LoadedRun& r) -> std::optional<PairedComparison> {
        if (r.reports.empty() || ref.reports.empty()) return std::nullopt;
        const EvalReport& a = r.reports.back();
        const EvalReport& b = ref.reports.back();
        return paired_compare(a.jsd_profile, b.jsd_profile, a.base_lp_profile, b.base_lp_profile);
    };

    if (format == ReportFormat::table_csv) {
        std::ostringstream out;
        out << "run_id,mode,seed,health,final_step,accuracy,fit_ppl,retention_ppl,mean_token_jsd,reference_run,"
               "paired_frac_lower_jsd,paired_frac_higher_base_lp,paired_mean_diff_jsd,paired_median_diff_jsd\n";
        for (const auto& r : runs) {
            out << r.run_id << ',' << to_string(r.config.trainer.mode) << ',' << r.config.trainer.seed << ',' << r.health;
            if (r.reports.empty()) {
                out << ",,,,,";
            } else {
                const EvalReport& e = r.reports.back();
                out << ',' << e.step << ',' << fmt(e.accuracy) << ',' << fmt(e.fit_ppl) << ',' << fmt(e.retention_ppl)
                    << ',' << fmt(e.mean_token_jsd);
            }
            out << ',' << ref.run_id;
            if (const auto pc = paired(r)) {
                out << ',' << fmt(pc->frac_lower_jsd) << ',' << fmt(pc->frac_higher_base_lp) << ','
                    << fmt(pc->mean_diff_jsd) << ',' << fmt(pc->median_diff_jsd) << '\n';
            } else {
                out << ",,,,\n";
            }
        }
        return out.str();
    }

    ordered_json doc;
    doc["reference_run"] = ref.run_id;
    ordered_json series = ordered_json::array();
    ordered_json by_k = ordered_json::array();
    ordered_json hists = ordered_json::array();
    for (const auto& r : runs) {
        ordered_json s;
        s["run_id"] = r.run_id;
        s["mode"] = to_string(r.config.trainer.mode);
        s["health"] = r.health;
        std::vector<long> steps;
        std::vector<double> acc, fit, ret, jsd;
        for (const auto& e : r.reports) {
            steps.push_back(e.step);
            acc.push_back(e.accuracy);
            fit.push_back(e.fit_infinite ? -1.0 : e.fit_ppl);
            ret.push_back(e.retention_ppl);
            jsd.push_back(e.mean_token_jsd);
        }
        s["eval_steps"] = steps;
        s["accuracy"] = acc;
        s["fit_ppl"] = fit;
        s["retention_ppl"] = ret;
        s["mean_token_jsd"] = jsd;
        s["loss_curve"] = {{"step", r.loss_steps}, {"total", r.loss_total}};
        series.push_back(s);

        const auto& ag = r.config.trainer.distill.agreement;
        by_k.push_back({{"run_id", r.run_id},
                        {"K", ag.enabled ? ag.K : 0},
                        {"strategy", to_string(ag.strategy)},
                        {"agree_gamma", ag.agree_gamma},
                        {"accuracy", r.reports.empty() ? ordered_json(nullptr) : ordered_json(r.reports.back().accuracy)}});

        if (const auto pc = paired(r)) {
            constexpr int bins = 20;
            const double lim = std::log(2.0);
            std::vector<long> counts(bins, 0);
            const auto& a = r.reports.back().jsd_profile;
            const auto& b = ref.reports.back().jsd_profile;
            for (std::size_t i = 0; i < a.size(); ++i) {
                const double x = (a[i] - b[i] + lim) / (2 * lim) * bins;
                ++counts[static_cast<std::size_t>(std::clamp(static_cast<int>(std::floor(x)), 0, bins - 1))];
            }
            hists.push_back({{"run_id", r.run_id},
                             {"reference_run", ref.run_id},
                             {"bin_range", {-lim, lim}},
                             {"diff_counts", counts},
                             {"comparison", to_json(*pc)}});
        }
    }
    doc["series"] = series;
    std::stable_sort(by_k.begin(), by_k.end(),
                     [](const ordered_json& x, const ordered_json& y) { return x["K"].get<int>() < y["K"].get<int>(); });
    doc["accuracy_vs_K"] = by_k;
    doc["paired_jsd_histograms"] = hists;
    return doc.dump(2) + "\n";
}

}  // namespace unisd
