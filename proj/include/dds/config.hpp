#pragma once

// Experiment configuration as a sectioned key = value text file merged with
// command-line overrides (overrides win). Unknown sections or keys are hard
// errors, and the fully resolved configuration is echoed back to disk so a
// run's inputs are always recoverable.

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dds/trainer.hpp"

namespace dds {

class CliConfig {
public:
    CliConfig() { install_defaults(); }

    // known keys and their defaults, grouped by section
    void install_defaults() {
        ExperimentConfig d;
        set_raw("gate.beta", fmt_double(d.gate.beta));
        set_raw("gate.zeta", fmt_double(d.gate.zeta));
        set_raw("gate.gamma", fmt_double(d.gate.gamma));
        set_raw("gate.delta", fmt_double(d.gate.delta));
        set_raw("gate.kappa", fmt_double(d.gate.kappa));
        set_raw("gate.epsilon", fmt_double(d.gate.epsilon));
        set_raw("gate.m", "26");
        set_raw("selector.channels", std::to_string(d.selector.channels));
        set_raw("selector.per_channel_scores", "false");
        set_raw("reconstructor.channels", std::to_string(d.reconstructor.channels));
        set_raw("reconstructor.latent", "0");
        set_raw("optimizer.lr", fmt_double(d.optimizer.lr));
        set_raw("optimizer.selector_lr", fmt_double(d.selector_lr));
        set_raw("optimizer.beta1", fmt_double(d.optimizer.beta1));
        set_raw("optimizer.beta2", fmt_double(d.optimizer.beta2));
        set_raw("optimizer.eps", fmt_double(d.optimizer.eps));
        set_raw("train.epochs", std::to_string(d.epochs));
        set_raw("train.batch_size", std::to_string(d.batch_size));
        set_raw("train.seed", std::to_string(d.seed));
        set_raw("train.mode", to_string(d.eval_mode));
        set_raw("train.spot_checks", "false");
        defaults_installed_ = true;
    }

    void load_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("config: cannot open " + path);
        std::string line, section;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            std::string s = strip(line);
            if (s.empty() || s[0] == '#' || s[0] == ';') continue;
            if (s.front() == '[' && s.back() == ']') {
                section = strip(s.substr(1, s.size() - 2));
                continue;
            }
            auto eq = s.find('=');
            if (eq == std::string::npos)
                throw ConfigError("config: " + path + ":" + std::to_string(lineno) +
                                  ": expected key = value, got '" + s + "'");
            std::string key = strip(s.substr(0, eq));
            std::string value = strip(s.substr(eq + 1));
            set(section.empty() ? key : section + "." + key, value);
        }
    }

    // "section.key=value" override (flags win over file values)
    void set_override(const std::string& assignment) {
        auto eq = assignment.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: override '" + assignment + "' is not of the form section.key=value");
        set(strip(assignment.substr(0, eq)), strip(assignment.substr(eq + 1)));
    }

    void set(const std::string& dotted_key, const std::string& value) {
        if (defaults_installed_ && !values_.count(dotted_key))
            throw ConfigError("config: unknown key '" + dotted_key + "'");
        values_[dotted_key] = value;
    }

    const std::string& get(const std::string& dotted_key) const {
        auto it = values_.find(dotted_key);
        if (it == values_.end()) throw ConfigError("config: unknown key '" + dotted_key + "'");
        return it->second;
    }

    double get_double(const std::string& key) const {
        const std::string& v = get(key);
        try {
            std::size_t used = 0;
            double d = std::stod(v, &used);
            if (used != v.size()) throw std::invalid_argument(v);
            return d;
        } catch (const std::exception&) {
            throw ConfigError("config: value of " + key + " is not a number: '" + v + "'");
        }
    }

    std::size_t get_size(const std::string& key) const {
        const std::string& v = get(key);
        try {
            std::size_t used = 0;
            long long n = std::stoll(v, &used);
            if (used != v.size() || n < 0) throw std::invalid_argument(v);
            return static_cast<std::size_t>(n);
        } catch (const std::exception&) {
            throw ConfigError("config: value of " + key + " is not a non-negative integer: '" + v + "'");
        }
    }

    bool get_bool(const std::string& key) const {
        const std::string& v = get(key);
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        throw ConfigError("config: value of " + key + " is not a boolean: '" + v + "'");
    }

    ExperimentConfig experiment() const {
        ExperimentConfig c;
        c.gate.beta = get_double("gate.beta");
        c.gate.zeta = get_double("gate.zeta");
        c.gate.gamma = get_double("gate.gamma");
        c.gate.delta = get_double("gate.delta");
        c.gate.kappa = get_double("gate.kappa");
        c.gate.epsilon = get_double("gate.epsilon");
        c.gate.m = get_size("gate.m");
        c.selector.channels = get_size("selector.channels");
        c.selector.per_channel_scores = get_bool("selector.per_channel_scores");
        c.reconstructor.channels = get_size("reconstructor.channels");
        c.reconstructor.latent_dim = get_size("reconstructor.latent");
        c.optimizer.lr = get_double("optimizer.lr");
        c.selector_lr = get_double("optimizer.selector_lr");
        c.optimizer.beta1 = get_double("optimizer.beta1");
        c.optimizer.beta2 = get_double("optimizer.beta2");
        c.optimizer.eps = get_double("optimizer.eps");
        c.epochs = get_size("train.epochs");
        c.batch_size = get_size("train.batch_size");
        if (c.batch_size == 0) throw ConfigError("config: train.batch_size must be >= 1");
        c.seed = get_size("train.seed");
        c.eval_mode = eval_mode_from_string(get("train.mode"));
        c.spot_check_theorem = get_bool("train.spot_checks");
        c.gate.validate();
        return c;
    }

    // canonical text form, stable section and key order
    std::string resolved_text() const {
        std::map<std::string, std::vector<std::pair<std::string, std::string>>> sections;
        for (const auto& [k, v] : values_) {
            auto dot = k.find('.');
            sections[k.substr(0, dot)].push_back({k.substr(dot + 1), v});
        }
        std::ostringstream os;
        bool first = true;
        for (const auto& [sec, kvs] : sections) {
            if (!first) os << "\n";
            first = false;
            os << "[" << sec << "]\n";
            for (const auto& [k, v] : kvs) os << k << " = " << v << "\n";
        }
        return os.str();
    }

    void echo_to(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw IoError("config: cannot open " + path + " for writing");
        out << resolved_text();
        if (!out) throw IoError("config: write failed for " + path);
    }

private:
    static std::string strip(const std::string& s) {
        std::size_t b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return "";
        std::size_t e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    void set_raw(const std::string& key, const std::string& value) { values_[key] = value; }

    std::map<std::string, std::string> values_;
    bool defaults_installed_ = false;
};

}  // namespace dds
