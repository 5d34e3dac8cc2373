#pragma once
// Flat key=value experiment configuration with dotted namespaces. Every key
// has a default; unknown keys are rejected by name. Files hold one `key=value`
// per line, `#` starts a comment.

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "onepiece/rng.hpp"

namespace onepiece {

class Config {
public:
    static const std::map<std::string, std::string>& default_map() {
        static const std::map<std::string, std::string> defaults = {
            // synthetic world
            {"world.users", "400"},
            {"world.items", "2000"},
            {"world.queries", "160"},
            {"world.categories", "24"},
            {"world.shops", "64"},
            {"world.latent_dim", "16"},
            {"world.days", "10"},
            {"world.sessions_per_user_day", "5"},
            {"world.exposure", "8"},
            {"world.pool", "32"},
            {"world.rate_click", "0.65"},
            {"world.rate_atc", "0.45"},
            {"world.rate_order", "0.55"},
            {"world.click_slope", "7.0"},
            {"world.stage_bonus", "1.2"},
            {"world.mix_user", "0.5"},
            {"world.expo_noise", "0.45"},
            {"world.drift", "0.03"},
            {"world.query_text_noise", "0.25"},
            {"world.click_threshold", "0.0"},
            {"world.compete", "2.0"},
            {"world.session_pool_frac", "1.0"},
            {"world.user_cat_mix", "0.35"},
            {"world.dom_penalty", "0.0"},
            {"world.expo_cat_cap", "0"},
            {"world.expo_pairs", "off"},
            {"world.price_buckets", "8"},
            {"world.pop_buckets", "8"},
            {"world.age_buckets", "8"},
            {"world.locations", "16"},
            {"world.anchor_len", "30"},
            // backbone and tokenizer
            {"model.dim", "16"},
            {"model.layers", "1"},
            {"model.heads", "2"},
            {"model.ff_mult", "4"},
            {"model.feature_dim", "8"},
            {"model.max_ih", "16"},
            {"model.max_pa", "30"},
            {"model.max_steps", "4"},
            {"model.init_sigma", "0.1"},
            {"model.vocab_items", "4096"},
            {"model.vocab_categories", "64"},
            {"model.vocab_shops", "128"},
            {"model.vocab_price", "16"},
            {"model.vocab_pop", "16"},
            {"model.vocab_users", "1024"},
            {"model.vocab_age", "16"},
            {"model.vocab_locations", "32"},
            {"model.vocab_queries", "512"},
            // training plan
            {"train.mode", "retrieval"},
            {"train.days", "0"},
            {"train.batch", "8"},
            {"train.lr", "0.003"},
            {"train.optimizer", "adaptive"},
            {"train.beta1", "0.9"},
            {"train.beta2", "0.999"},
            {"train.adam_eps", "1e-8"},
            {"train.clip_norm", "1.0"},
            {"train.lr_decay", "1.0"},
            {"train.eta", "0.07"},
            {"train.steps", "2"},
            {"train.group_size", "4"},
            {"train.tasks", "progressive"},
            {"train.mask", "bidirectional"},
            {"train.cis", "visible"},
            {"train.pa", "on"},
            {"train.pa_len", "10"},
            {"train.sd", "on"},
            {"train.ih_len", "16"},
            {"train.neg_unexposed", "8"},
            {"train.neg_samecat", "4"},
            {"train.neg_exposed_cap", "8"},
            {"train.rank_neg_unexposed", "4"},
            {"train.max_groups", "2"},
            {"train.seed", "1"},
            // evaluation
            {"eval.recall_k", "100,500"},
            {"eval.fusion_alpha", "1.0"},
            {"eval.fusion_beta", "0.2"},
            {"eval.fusion_gamma", "0.1"},
            {"eval.fusion_a", "1.0"},
            {"eval.fusion_b", "1.0"},
            // run
            {"run.out", "out"},
            {"run.seed", "42"},
        };
        return defaults;
    }

    Config() : kv_(default_map()) {}

    void set(const std::string& key, const std::string& value) {
        if (!default_map().count(key)) {
            throw std::invalid_argument("unknown config key: " + key);
        }
        kv_[key] = value;
    }

    const std::string& get_str(const std::string& key) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) throw std::invalid_argument("unknown config key: " + key);
        return it->second;
    }

    long long get_int(const std::string& key) const {
        const std::string& s = get_str(key);
        std::size_t pos = 0;
        long long v = std::stoll(s, &pos);
        if (pos != s.size()) throw std::invalid_argument("config " + key + ": not an integer: " + s);
        return v;
    }

    double get_double(const std::string& key) const {
        const std::string& s = get_str(key);
        std::size_t pos = 0;
        double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument("config " + key + ": not a number: " + s);
        return v;
    }

    bool get_flag(const std::string& key) const {
        const std::string& s = get_str(key);
        if (s == "on" || s == "true" || s == "1") return true;
        if (s == "off" || s == "false" || s == "0") return false;
        throw std::invalid_argument("config " + key + ": not a flag: " + s);
    }

    std::vector<int> get_int_list(const std::string& key) const {
        std::vector<int> out;
        std::stringstream ss(get_str(key));
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            if (!tok.empty()) out.push_back(std::stoi(tok));
        }
        return out;
    }

    void apply_override(const std::string& assignment) {
        auto eq = assignment.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("override must be key=value: " + assignment);
        }
        set(assignment.substr(0, eq), assignment.substr(eq + 1));
    }

    void load_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot open config file: " + path);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            auto first = line.find_first_not_of(" \t\r");
            if (first == std::string::npos) continue;
            auto last = line.find_last_not_of(" \t\r");
            std::string trimmed = line.substr(first, last - first + 1);
            try {
                apply_override(trimmed);
            } catch (const std::invalid_argument& e) {
                throw std::invalid_argument(path + ":" + std::to_string(lineno) + ": " + e.what());
            }
        }
    }

    std::string dump() const {
        std::string out;
        for (const auto& [k, v] : kv_) {
            out += k;
            out += "=";
            out += v;
            out += "\n";
        }
        return out;
    }

    std::uint64_t fingerprint() const {
        std::uint64_t h = 0x9ae16a3b2f90404full;
        for (char c : dump()) h = splitmix64(h ^ static_cast<std::uint64_t>(static_cast<unsigned char>(c)));
        return h;
    }

    const std::map<std::string, std::string>& raw() const { return kv_; }

private:
    std::map<std::string, std::string> kv_;
};

}  // namespace onepiece
