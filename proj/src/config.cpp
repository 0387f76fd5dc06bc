#include "voldet/config.hpp"

#include "voldet/errors.hpp"
#include "voldet/io.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace voldet {

namespace {

struct KeyDefault {
    const char* key;
    const char* value;
};

// The full key registry with desk-scale defaults.
const KeyDefault kRegistry[] = {
    {"threads", "0"},
    {"seed", "1"},

    // phantom dataset generation
    {"data.dims", "64"},
    {"data.n_train", "40"},
    {"data.n_test", "10"},
    {"data.lesions_min", "1"},
    {"data.lesions_max", "3"},
    {"data.d_min", "4"},
    {"data.d_max", "12"},
    {"data.n_vessels", "3"},
    {"data.noise_sigma", "0.05"},
    {"data.lesion_contrast", "0.4"},

    // backbone / model
    {"model.crop", "32"},
    {"model.growth", "16"},
    {"model.preblock_channels", "16"},
    {"model.dense_layers", "1,1,1"},
    {"model.trans_channels", "32"},
    {"model.pyramid_channels", "32"},
    {"model.anchors", "anchor1"},

    // anchor matching
    {"match.iou_pos", "0.5"},
    {"match.iou_neg", "0.02"},

    // losses
    {"loss.alpha", "0.8"},
    {"loss.gamma", "5"},
    {"loss.t0", "1"},
    {"loss.t1", "10"},
    {"loss.tn_threshold", "0.5"},
    {"loss.lambda_reg", "1"},

    // FPR branch
    {"fprn.crop_side", "5"},
    {"fprn.magnify", "false"},
    {"fprn.roi_out", "2"},
    {"fprn.samples_per_bin", "2"},
    {"fprn.cap", "16"},
    {"fprn.train_score_thresh", "0.05"},
    {"fprn.train_topk", "32"},

    // training
    {"train.epochs", "10"},
    {"train.warmup_epochs", "6"},
    {"train.batch", "2"},
    {"train.crops_per_scan", "2"},
    {"train.lr", "0.02"},
    {"train.lr_decay", "0.1"},
    {"train.milestones", ""},
    {"train.momentum", "0.9"},
    {"train.weight_decay", "0.0001"},
    {"train.mode", "joint"},
    {"train.focus_prob", "0.5"},
    {"train.abs", "false"},
    {"train.abs_epochs", "2"},
    {"train.abs_score_thresh", "0.5"},

    // inference
    {"infer.tile", "32"},
    {"infer.margin", "8"},
    {"infer.score_thresh", "0.269"},
    {"infer.pre_nms_topk", "128"},
    {"infer.nms_iou", "0.1"},
    {"infer.max_dets", "100"},
    {"infer.fprn", "true"},

    // evaluation
    {"eval.bucket_edges", "10,30"},
    {"eval.bucket_fp_rate", "4"},
};

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

} // namespace

RunConfig RunConfig::defaults() {
    RunConfig cfg;
    for (const KeyDefault& kd : kRegistry) cfg.values_[kd.key] = kd.value;
    return cfg;
}

void RunConfig::set(const std::string& key, const std::string& value) {
    if (values_.find(key) == values_.end())
        throw ParseError("config: unknown key '" + key + "'");
    values_[key] = value;
}

bool RunConfig::has(const std::string& key) const { return values_.count(key) > 0; }

const std::string& RunConfig::get_str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ParseError("config: unknown key '" + key + "'");
    return it->second;
}

std::int64_t RunConfig::get_int(const std::string& key) const {
    const std::string& s = get_str(key);
    try {
        std::size_t pos = 0;
        const long long v = std::stoll(s, &pos);
        if (pos != s.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ParseError("config: key '" + key + "' is not an integer: '" + s + "'");
    }
}

double RunConfig::get_double(const std::string& key) const {
    const std::string& s = get_str(key);
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ParseError("config: key '" + key + "' is not a number: '" + s + "'");
    }
}

bool RunConfig::get_bool(const std::string& key) const {
    std::string s = get_str(key);
    std::transform(s.begin(), s.end(), s.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (s == "true" || s == "1" || s == "on" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "off" || s == "no") return false;
    throw ParseError("config: key '" + key + "' is not a boolean: '" + s + "'");
}

std::vector<std::int64_t> RunConfig::get_int_list(const std::string& key) const {
    const std::string& s = get_str(key);
    std::vector<std::int64_t> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        try {
            out.push_back(std::stoll(item));
        } catch (const std::exception&) {
            throw ParseError("config: key '" + key + "' has a non-integer element: '" + item + "'");
        }
    }
    return out;
}

RunConfig RunConfig::load(const std::string& path, bool apply_env) {
    RunConfig cfg = defaults();
    if (!path.empty()) {
        std::ifstream is(path);
        if (!is) throw ParseError("config: cannot open " + path);
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(is, line)) {
            ++line_no;
            const std::string stripped = trim(line.substr(0, line.find('#')));
            if (stripped.empty()) continue;
            const auto eq = stripped.find('=');
            if (eq == std::string::npos)
                throw ParseError(path + ":" + std::to_string(line_no) + ": expected key = value");
            const std::string key = trim(stripped.substr(0, eq));
            const std::string value = trim(stripped.substr(eq + 1));
            try {
                cfg.set(key, value);
            } catch (const ParseError&) {
                throw ParseError(path + ":" + std::to_string(line_no) + ": unknown key '" + key + "'");
            }
        }
    }
    if (apply_env) cfg.apply_env_overrides();
    return cfg;
}

std::string RunConfig::env_name(const std::string& key) {
    std::string name = "VOLDET_";
    for (char c : key)
        name += std::isalnum(static_cast<unsigned char>(c))
                    ? static_cast<char>(std::toupper(static_cast<unsigned char>(c)))
                    : '_';
    return name;
}

void RunConfig::apply_env_overrides() {
    for (auto& [key, value] : values_) {
        const char* env = std::getenv(env_name(key).c_str());
        if (env != nullptr) value = env;
    }
}

std::string RunConfig::canonical_text() const {
    std::string out;
    for (const auto& [key, value] : values_) {
        out += key;
        out += " = ";
        out += value;
        out += '\n';
    }
    return out;
}

std::uint64_t RunConfig::hash() const { return fnv1a64(canonical_text()); }

} // namespace voldet
