#include "mmkd/config.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <vector>

#include "json.hpp"
#include "mmkd/errors.hpp"

using nlohmann::json;

namespace mmkd::config {

namespace {

// Wraps one config section: every read is type-checked with a message naming
// the section and key, and finish() rejects keys nobody asked for.
class Section {
public:
    Section(const json& obj, std::string name) : obj_(obj), name_(std::move(name)) {
        if (!obj_.is_object()) {
            throw ConfigError("config section '" + name_ + "' must be an object");
        }
    }

    template <typename T>
    void read(const char* key, T& out) {
        allowed_.insert(key);
        if (!obj_.contains(key)) return;
        try {
            out = obj_.at(key).get<T>();
        } catch (const json::exception&) {
            throw ConfigError("config key '" + name_ + "." + key + "' has the wrong type");
        }
    }

    template <typename T, typename Fn>
    void read_named(const char* key, T& out, Fn from_name) {
        allowed_.insert(key);
        if (!obj_.contains(key)) return;
        if (!obj_.at(key).is_string()) {
            throw ConfigError("config key '" + name_ + "." + key + "' must be a name string");
        }
        out = from_name(obj_.at(key).get<std::string>());
    }

    // Registers a key handled outside this helper so finish() accepts it.
    void allow(const char* key) { allowed_.insert(key); }

    void finish() const {
        for (auto it = obj_.begin(); it != obj_.end(); ++it) {
            if (!allowed_.count(it.key())) {
                throw ConfigError("config: unknown key '" + name_ + "." + it.key() + "'");
            }
        }
    }

private:
    const json& obj_;
    std::string name_;
    std::set<std::string> allowed_;
};

std::vector<data::Family> parse_families(const json& section, const char* key,
                                         const std::string& section_name,
                                         const std::vector<data::Family>& fallback) {
    if (!section.contains(key)) return fallback;
    const json& arr = section.at(key);
    if (!arr.is_array()) {
        throw ConfigError("config key '" + section_name + "." + key + "' must be an array");
    }
    std::vector<data::Family> out;
    for (const json& item : arr) {
        if (!item.is_string()) {
            throw ConfigError("config key '" + section_name + "." + key +
                              "' must hold family names");
        }
        out.push_back(data::family_from_name(item.get<std::string>()));
    }
    return out;
}

} // namespace

Experiment parse_experiment(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    if (!doc.is_object()) throw ConfigError("config: top level must be an object");
    for (auto it = doc.begin(); it != doc.end(); ++it) {
        const std::string& k = it.key();
        if (k != "model" && k != "data" && k != "train" && k != "distill") {
            throw ConfigError("config: unknown section '" + k + "'");
        }
    }

    Experiment exp;
    int patch_pixels = exp.encoder.patch_pixels;
    uint64_t encoder_seed = exp.encoder.seed;

    if (doc.contains("model")) {
        Section s(doc["model"], "model");
        s.read("vocab_size", exp.teacher.vocab_size);
        s.read("num_layers", exp.teacher.num_layers);
        s.read("hidden_dim", exp.teacher.hidden_dim);
        s.read("num_heads", exp.teacher.num_heads);
        s.read("max_seq", exp.teacher.max_seq);
        s.read("visual_dim", exp.teacher.visual_dim);
        s.read("ffn_mult", exp.teacher.ffn_mult);
        s.read("student_keep_every", exp.student_keep_every);
        s.read("init_seed", exp.init_seed);
        s.read("patch_pixels", patch_pixels);
        s.read("encoder_seed", encoder_seed);
        s.finish();
    }

    if (doc.contains("data")) {
        Section s(doc["data"], "data");
        s.read("grid_rows", exp.data.grid.rows);
        s.read("grid_cols", exp.data.grid.cols);
        s.read("occupancy_pct", exp.data.grid.occupancy_pct);
        s.read("n_train", exp.data.n_train);
        s.read("n_eval", exp.data.n_eval);
        s.read("n_pretrain", exp.data.n_pretrain);
        s.allow("families");
        s.allow("pretrain_families");
        s.finish();
        exp.data.families = parse_families(doc["data"], "families", "data", exp.data.families);
        exp.data.pretrain_families =
            parse_families(doc["data"], "pretrain_families", "data", exp.data.pretrain_families);
    }

    if (doc.contains("train")) {
        const json& sec = doc["train"];
        if (sec.is_object() && sec.contains("stage") && sec["stage"].is_string() &&
            sec["stage"].get<std::string>() == "pretrain") {
            exp.train = train::TrainConfig::pretrain_defaults();
        }
        Section s(sec, "train");
        s.read("stage", exp.train.stage);
        s.read("batch_size", exp.train.batch_size);
        s.read("learning_rate", exp.train.learning_rate);
        s.read("warmup_ratio", exp.train.warmup_ratio);
        s.read("epochs", exp.train.epochs);
        s.read("weight_decay", exp.train.weight_decay);
        s.read("grad_clip", exp.train.grad_clip);
        s.read("adam_beta1", exp.train.adam_beta1);
        s.read("adam_beta2", exp.train.adam_beta2);
        s.read("adam_eps", exp.train.adam_eps);
        s.read("seed", exp.train.seed);
        s.read("cache_teacher", exp.train.cache_teacher);
        s.finish();
    }

    if (doc.contains("distill")) {
        Section s(doc["distill"], "distill");
        s.read("temperature", exp.distill.temperature);
        s.read("jsd_beta", exp.distill.jsd_beta);
        s.read("scale_by_t_squared", exp.distill.scale_by_t_squared);
        s.read_named("logit_loss", exp.distill.logit_loss, losses::logit_loss_from_name);
        s.read("standardize_logits", exp.distill.standardize_logits);
        s.read_named("logit_mask", exp.distill.logit_mask, losses::mask_policy_from_name);
        s.read_named("feature_loss", exp.distill.feature_loss, losses::feature_loss_from_name);
        s.read("feature_layers", exp.distill.feature_layers);
        s.read_named("feature_mask", exp.distill.feature_mask, losses::mask_policy_from_name);
        s.read_named("affinity_loss", exp.distill.affinity_loss, losses::affinity_loss_from_name);
        s.read_named("attn_group", exp.distill.attn_group, losses::attn_group_from_name);
        s.read("w_ce", exp.distill.w_ce);
        s.read("w_logit", exp.distill.w_logit);
        s.read("w_feature", exp.distill.w_feature);
        s.read("w_affinity", exp.distill.w_affinity);
        s.finish();
    }

    exp.teacher.validate();
    exp.train.validate();
    exp.distill.validate();

    exp.encoder.grid_rows = exp.data.grid.rows;
    exp.encoder.grid_cols = exp.data.grid.cols;
    exp.encoder.visual_dim = exp.teacher.visual_dim;
    exp.encoder.patch_pixels = patch_pixels;
    exp.encoder.seed = encoder_seed;
    exp.encoder.validate();
    return exp;
}

Experiment load_experiment(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open config '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_experiment(buf.str());
}

} // namespace mmkd::config
