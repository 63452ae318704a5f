#include "fqgan/config.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace fqgan {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, sep)) out.push_back(trim(cur));
    if (!s.empty() && s.back() == sep) out.emplace_back();
    return out;
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

template <typename T>
T parse_integer(const std::string& key, const std::string& value) {
    T out{};
    const auto* first = value.data();
    const auto* last = value.data() + value.size();
    auto [ptr, ec] = std::from_chars(first, last, out);
    if (ec != std::errc{} || ptr != last) {
        throw ConfigError("config key '" + key + "': expected an integer, got '" + value + "'");
    }
    return out;
}

double parse_double(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected a number, got '" + value + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ConfigError("config key '" + key + "': expected true/false, got '" + value + "'");
}

// Reads the keys a parser knows and remembers which ones it used.
class Reader {
public:
    explicit Reader(const KeyValues& kv) : kv_(kv) {}

    template <typename T>
    void integer(const std::string& key, T& out) {
        if (auto it = kv_.find(key); it != kv_.end()) out = parse_integer<T>(key, it->second);
    }
    void number(const std::string& key, double& out) {
        if (auto it = kv_.find(key); it != kv_.end()) out = parse_double(key, it->second);
    }
    void boolean(const std::string& key, bool& out) {
        if (auto it = kv_.find(key); it != kv_.end()) out = parse_bool(key, it->second);
    }
    const std::string* raw(const std::string& key) const {
        auto it = kv_.find(key);
        return it == kv_.end() ? nullptr : &it->second;
    }

private:
    const KeyValues& kv_;
};

const std::set<std::string>& tokenizer_keys() {
    static const std::set<std::string> keys = {
        "k", "codebook_size", "code_dim", "downsample_ratio", "image_size", "lambda_disentangle",
        "lambda_rep", "teacher_assignment", "commitment_beta", "gan_start_step", "perceptual_weight",
        "gan_weight", "base_channels", "res_blocks", "disc_channels", "codebook_l2_norm",
        "teacher_dim", "teacher_grid", "teacher_stores"};
    return keys;
}

const std::set<std::string>& far_keys() {
    static const std::set<std::string> keys = {
        "backbone_layers", "head_layers", "width", "heads", "num_classes", "class_dropout_prob",
        "cfg_scale", "head_variant", "mlp_hidden", "dropout"};
    return keys;
}

const std::set<std::string>& train_keys() {
    static const std::set<std::string> keys = {
        "batch_size", "learning_rate", "max_steps", "seed", "checkpoint_every", "eval_every",
        "adam_beta1", "adam_beta2", "tokenizer_grad_clip", "far_grad_clip", "val_fraction"};
    return keys;
}

std::vector<std::string> default_assignment(int k) {
    std::vector<std::string> out(static_cast<std::size_t>(std::max(k, 0)));
    if (k == 2) out[1] = "clip";
    if (k >= 3) {
        out[1] = "dino";
        out[2] = "clip";
    }
    return out;
}

void require(bool ok, const std::string& key, const std::string& what) {
    if (!ok) throw ConfigError("config key '" + key + "': " + what);
}

}  // namespace

KeyValues parse_key_values(const std::string& text) {
    KeyValues kv;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
        }
        auto key = trim(line.substr(0, eq));
        auto value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
        if (kv.count(key)) throw ConfigError("config key '" + key + "': duplicated");
        kv[key] = value;
    }
    return kv;
}

KeyValues read_key_values(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_key_values(ss.str());
}

std::string format_key_values(const KeyValues& kv) {
    std::string out;
    for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
    return out;
}

void apply_overrides(KeyValues& kv, const std::vector<std::string>& overrides) {
    for (const auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos || eq == 0) {
            throw ConfigError("override '" + o + "': expected key=value");
        }
        kv[trim(o.substr(0, eq))] = trim(o.substr(eq + 1));
    }
}

std::string to_string(HeadVariant v) {
    switch (v) {
        case HeadVariant::FactorizedAr: return "factorized_ar";
        case HeadVariant::KLinear: return "k_linear";
        case HeadVariant::KMlp: return "k_mlp";
    }
    return "?";
}

HeadVariant head_variant_from_string(const std::string& s) {
    if (s == "factorized_ar") return HeadVariant::FactorizedAr;
    if (s == "k_linear") return HeadVariant::KLinear;
    if (s == "k_mlp") return HeadVariant::KMlp;
    throw ConfigError("config key 'head_variant': unknown variant '" + s + "'");
}

int TokenizerConfig::num_stages() const {
    return std::countr_zero(static_cast<unsigned>(downsample_ratio));
}

void TokenizerConfig::validate() const {
    require(k >= 1, "k", "must be >= 1");
    require(codebook_size >= 2, "codebook_size", "must be >= 2");
    require(code_dim >= 1, "code_dim", "must be >= 1");
    require(downsample_ratio >= 2 && std::has_single_bit(static_cast<unsigned>(downsample_ratio)),
            "downsample_ratio", "must be a power of two >= 2");
    require(image_size >= 1, "image_size", "must be >= 1");
    require(image_size % downsample_ratio == 0, "image_size", "image_size not divisible by downsample_ratio");
    require(lambda_disentangle >= 0, "lambda_disentangle", "must be >= 0");
    require(lambda_rep >= 0, "lambda_rep", "must be >= 0");
    require(static_cast<int>(teacher_assignment.size()) == k, "teacher_assignment",
            "length must equal k (" + std::to_string(k) + ")");
    require(commitment_beta >= 0, "commitment_beta", "must be >= 0");
    require(gan_start_step >= 0, "gan_start_step", "must be >= 0");
    require(perceptual_weight >= 0, "perceptual_weight", "must be >= 0");
    require(gan_weight >= 0, "gan_weight", "must be >= 0");
    require(base_channels >= 8 && base_channels % 8 == 0, "base_channels", "must be a positive multiple of 8");
    require(res_blocks >= 1, "res_blocks", "must be >= 1");
    require(disc_channels >= 8 && disc_channels % 8 == 0, "disc_channels", "must be a positive multiple of 8");
    require(teacher_dim >= 1, "teacher_dim", "must be >= 1");
    require(teacher_grid >= 1, "teacher_grid", "must be >= 1");
    for (const auto& t : teacher_assignment) {
        require(t.find_first_of(",: ") == std::string::npos, "teacher_assignment", "invalid teacher id '" + t + "'");
    }
}

void FarConfig::validate() const {
    require(backbone_layers >= 1, "backbone_layers", "must be >= 1");
    require(width >= 1, "width", "must be >= 1");
    require(heads >= 1, "heads", "must be >= 1");
    require(width % heads == 0, "width", "must be divisible by heads");
    require(head_variant != HeadVariant::FactorizedAr || head_layers >= 1, "head_layers",
            "must be >= 1 for factorized_ar");
    require(head_layers >= 0, "head_layers", "must be >= 0");
    require(num_classes >= 1, "num_classes", "must be >= 1");
    require(class_dropout_prob >= 0 && class_dropout_prob < 1, "class_dropout_prob", "must be in [0, 1)");
    require(cfg_scale >= 0, "cfg_scale", "must be >= 0");
    require(head_variant != HeadVariant::KMlp || mlp_hidden >= 1, "mlp_hidden", "must be >= 1 for k_mlp");
    require(dropout >= 0 && dropout < 1, "dropout", "must be in [0, 1)");
}

void TrainConfig::validate() const {
    require(batch_size >= 1, "batch_size", "must be >= 1");
    require(learning_rate > 0, "learning_rate", "must be > 0");
    require(max_steps >= 0, "max_steps", "must be >= 0");
    require(checkpoint_every >= 0, "checkpoint_every", "must be >= 0");
    require(eval_every >= 0, "eval_every", "must be >= 0");
    require(adam_beta1 >= 0 && adam_beta1 < 1, "adam_beta1", "must be in [0, 1)");
    require(adam_beta2 >= 0 && adam_beta2 < 1, "adam_beta2", "must be in [0, 1)");
    require(tokenizer_grad_clip >= 0, "tokenizer_grad_clip", "must be >= 0");
    require(far_grad_clip >= 0, "far_grad_clip", "must be >= 0");
    require(val_fraction >= 0 && val_fraction < 1, "val_fraction", "must be in [0, 1)");
}

TokenizerConfig tokenizer_config_from(const KeyValues& kv) {
    TokenizerConfig c;
    Reader r(kv);
    r.integer("k", c.k);
    r.integer("codebook_size", c.codebook_size);
    r.integer("code_dim", c.code_dim);
    r.integer("downsample_ratio", c.downsample_ratio);
    r.integer("image_size", c.image_size);
    r.number("lambda_disentangle", c.lambda_disentangle);
    r.number("lambda_rep", c.lambda_rep);
    r.number("commitment_beta", c.commitment_beta);
    r.integer("gan_start_step", c.gan_start_step);
    r.number("perceptual_weight", c.perceptual_weight);
    r.number("gan_weight", c.gan_weight);
    r.integer("base_channels", c.base_channels);
    r.integer("res_blocks", c.res_blocks);
    r.integer("disc_channels", c.disc_channels);
    r.boolean("codebook_l2_norm", c.codebook_l2_norm);
    r.integer("teacher_dim", c.teacher_dim);
    r.integer("teacher_grid", c.teacher_grid);
    if (const auto* v = r.raw("teacher_assignment")) {
        c.teacher_assignment.clear();
        for (auto& item : split(*v, ',')) c.teacher_assignment.push_back(item == "none" ? "" : item);
    } else {
        c.teacher_assignment = default_assignment(c.k);
    }
    if (const auto* v = r.raw("teacher_stores"); v && !v->empty()) {
        for (auto& item : split(*v, ',')) {
            const auto colon = item.find(':');
            require(colon != std::string::npos && colon > 0, "teacher_stores", "expected id:path entries");
            c.teacher_stores[item.substr(0, colon)] = item.substr(colon + 1);
        }
    }
    c.validate();
    return c;
}

FarConfig far_config_from(const KeyValues& kv) {
    FarConfig c;
    Reader r(kv);
    r.integer("backbone_layers", c.backbone_layers);
    r.integer("head_layers", c.head_layers);
    r.integer("width", c.width);
    r.integer("heads", c.heads);
    r.integer("num_classes", c.num_classes);
    r.number("class_dropout_prob", c.class_dropout_prob);
    r.number("cfg_scale", c.cfg_scale);
    if (const auto* v = r.raw("head_variant")) c.head_variant = head_variant_from_string(*v);
    r.integer("mlp_hidden", c.mlp_hidden);
    r.number("dropout", c.dropout);
    c.validate();
    return c;
}

TrainConfig train_config_from(const KeyValues& kv) {
    TrainConfig c;
    Reader r(kv);
    r.integer("batch_size", c.batch_size);
    r.number("learning_rate", c.learning_rate);
    r.integer("max_steps", c.max_steps);
    r.integer("seed", c.seed);
    r.integer("checkpoint_every", c.checkpoint_every);
    r.integer("eval_every", c.eval_every);
    r.number("adam_beta1", c.adam_beta1);
    r.number("adam_beta2", c.adam_beta2);
    r.number("tokenizer_grad_clip", c.tokenizer_grad_clip);
    r.number("far_grad_clip", c.far_grad_clip);
    r.number("val_fraction", c.val_fraction);
    c.validate();
    return c;
}

KeyValues to_key_values(const TokenizerConfig& c) {
    KeyValues kv;
    kv["k"] = std::to_string(c.k);
    kv["codebook_size"] = std::to_string(c.codebook_size);
    kv["code_dim"] = std::to_string(c.code_dim);
    kv["downsample_ratio"] = std::to_string(c.downsample_ratio);
    kv["image_size"] = std::to_string(c.image_size);
    kv["lambda_disentangle"] = fmt_double(c.lambda_disentangle);
    kv["lambda_rep"] = fmt_double(c.lambda_rep);
    std::string assignment;
    for (std::size_t i = 0; i < c.teacher_assignment.size(); ++i) {
        if (i) assignment += ",";
        assignment += c.teacher_assignment[i].empty() ? "none" : c.teacher_assignment[i];
    }
    kv["teacher_assignment"] = assignment;
    kv["commitment_beta"] = fmt_double(c.commitment_beta);
    kv["gan_start_step"] = std::to_string(c.gan_start_step);
    kv["perceptual_weight"] = fmt_double(c.perceptual_weight);
    kv["gan_weight"] = fmt_double(c.gan_weight);
    kv["base_channels"] = std::to_string(c.base_channels);
    kv["res_blocks"] = std::to_string(c.res_blocks);
    kv["disc_channels"] = std::to_string(c.disc_channels);
    kv["codebook_l2_norm"] = c.codebook_l2_norm ? "true" : "false";
    kv["teacher_dim"] = std::to_string(c.teacher_dim);
    kv["teacher_grid"] = std::to_string(c.teacher_grid);
    std::string stores;
    for (const auto& [id, path] : c.teacher_stores) {
        if (!stores.empty()) stores += ",";
        stores += id + ":" + path;
    }
    kv["teacher_stores"] = stores;
    return kv;
}

KeyValues to_key_values(const FarConfig& c) {
    KeyValues kv;
    kv["backbone_layers"] = std::to_string(c.backbone_layers);
    kv["head_layers"] = std::to_string(c.head_layers);
    kv["width"] = std::to_string(c.width);
    kv["heads"] = std::to_string(c.heads);
    kv["num_classes"] = std::to_string(c.num_classes);
    kv["class_dropout_prob"] = fmt_double(c.class_dropout_prob);
    kv["cfg_scale"] = fmt_double(c.cfg_scale);
    kv["head_variant"] = to_string(c.head_variant);
    kv["mlp_hidden"] = std::to_string(c.mlp_hidden);
    kv["dropout"] = fmt_double(c.dropout);
    return kv;
}

KeyValues to_key_values(const TrainConfig& c) {
    KeyValues kv;
    kv["batch_size"] = std::to_string(c.batch_size);
    kv["learning_rate"] = fmt_double(c.learning_rate);
    kv["max_steps"] = std::to_string(c.max_steps);
    kv["seed"] = std::to_string(c.seed);
    kv["checkpoint_every"] = std::to_string(c.checkpoint_every);
    kv["eval_every"] = std::to_string(c.eval_every);
    kv["adam_beta1"] = fmt_double(c.adam_beta1);
    kv["adam_beta2"] = fmt_double(c.adam_beta2);
    kv["tokenizer_grad_clip"] = fmt_double(c.tokenizer_grad_clip);
    kv["far_grad_clip"] = fmt_double(c.far_grad_clip);
    kv["val_fraction"] = fmt_double(c.val_fraction);
    return kv;
}

RunConfig run_config_from(const KeyValues& kv) {
    for (const auto& [key, value] : kv) {
        if (!tokenizer_keys().count(key) && !far_keys().count(key) && !train_keys().count(key)) {
            throw ConfigError("config key '" + key + "': unknown key");
        }
    }
    return RunConfig{tokenizer_config_from(kv), far_config_from(kv), train_config_from(kv)};
}

KeyValues to_key_values(const RunConfig& c) {
    KeyValues kv = to_key_values(c.tokenizer);
    kv.merge(to_key_values(c.far));
    kv.merge(to_key_values(c.train));
    return kv;
}

RunConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
    auto kv = read_key_values(path);
    apply_overrides(kv, overrides);
    return run_config_from(kv);
}

void save_config(const RunConfig& c, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write config file " + path.string());
    out << format_key_values(to_key_values(c));
}

}  // namespace fqgan
