#pragma once

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "prism/core.hpp"

namespace prism {

// ---------------------------------------------------------------------------
// Run configuration. Plain key=value text, '#' comments, later keys win.
// `preset=toy|full` expands immediately, so keys after it still override.
// PRISM_SEED in the environment beats the file's seed.
// ---------------------------------------------------------------------------

struct Config {
    // model
    int c_coarse = 64;
    int c_fine = 32;
    int mpm_layers = 2;
    int heads = 4;
    double theta_p = 0.05;
    double theta_c = 0.2;
    double tau = 0.1;
    int refine_window = 5;
    std::string preset = "toy";

    // training
    double lr = 8e-4;
    double weight_decay = 1e-4;
    double w_coarse = 1.0;  // loss term weights, all equal by default
    double w_fine = 1.0;
    double w_prune = 1.0;
    int batch = 1;
    int steps = 200;
    int pairs = 8;
    int image_size = 128;
    std::uint64_t seed = 42;
    std::string dataset;  // optional on-disk pairs; empty = synthesize on the fly
    int log_every = 10;
    int checkpoint_every = 0;  // 0 = only write the final checkpoint

    void apply_preset(const std::string& name) {
        if (name == "toy") {
            c_coarse = 64;
            c_fine = 32;
            mpm_layers = 2;
            heads = 4;
        } else if (name == "full") {
            c_coarse = 256;
            c_fine = 128;
            mpm_layers = 4;
            heads = 4;
        } else {
            throw ConfigError("unknown preset '" + name + "' (expected toy or full)");
        }
        preset = name;
    }

    void set(const std::string& key, const std::string& value) {
        auto as_int = [&](int lo) {
            std::size_t pos = 0;
            long long v = 0;
            try {
                v = std::stoll(value, &pos);
            } catch (const std::exception&) {
                throw ConfigError("config key '" + key + "': bad integer '" + value + "'");
            }
            if (pos != value.size() || v < lo)
                throw ConfigError("config key '" + key + "': bad integer '" + value + "'");
            return int(v);
        };
        auto as_real = [&]() {
            std::size_t pos = 0;
            double v = 0;
            try {
                v = std::stod(value, &pos);
            } catch (const std::exception&) {
                throw ConfigError("config key '" + key + "': bad number '" + value + "'");
            }
            if (pos != value.size())
                throw ConfigError("config key '" + key + "': bad number '" + value + "'");
            return v;
        };
        auto as_u64 = [&]() {
            std::size_t pos = 0;
            std::uint64_t v = 0;
            try {
                v = std::stoull(value, &pos);
            } catch (const std::exception&) {
                throw ConfigError("config key '" + key + "': bad seed '" + value + "'");
            }
            if (pos != value.size())
                throw ConfigError("config key '" + key + "': bad seed '" + value + "'");
            return v;
        };

        if (key == "preset") apply_preset(value);
        else if (key == "c_coarse") c_coarse = as_int(1);
        else if (key == "c_fine") c_fine = as_int(1);
        else if (key == "mpm_layers") mpm_layers = as_int(1);
        else if (key == "heads") heads = as_int(1);
        else if (key == "theta_p") theta_p = as_real();
        else if (key == "theta_c") theta_c = as_real();
        else if (key == "tau") tau = as_real();
        else if (key == "refine_window") refine_window = as_int(3);
        else if (key == "lr") lr = as_real();
        else if (key == "weight_decay") weight_decay = as_real();
        else if (key == "w_coarse") w_coarse = as_real();
        else if (key == "w_fine") w_fine = as_real();
        else if (key == "w_prune") w_prune = as_real();
        else if (key == "batch") batch = as_int(1);
        else if (key == "steps") steps = as_int(0);
        else if (key == "pairs") pairs = as_int(1);
        else if (key == "image_size") image_size = as_int(32);
        else if (key == "seed") seed = as_u64();
        else if (key == "dataset") dataset = value;
        else if (key == "log_every") log_every = as_int(1);
        else if (key == "checkpoint_every") checkpoint_every = as_int(0);
        else throw ConfigError("unknown config key '" + key + "'");
    }

    void validate() const {
        auto in_unit = [](double v) { return v >= 0.0 && v < 1.0; };
        if (!in_unit(theta_p)) throw ConfigError("theta_p must be in [0,1)");
        if (!(theta_c > 0.0 && theta_c < 1.0)) throw ConfigError("theta_c must be in (0,1)");
        if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
        if (refine_window < 3 || refine_window % 2 == 0)
            throw ConfigError("refine_window must be odd and >= 3");
        if (c_coarse % heads != 0) throw ConfigError("c_coarse must be divisible by heads");
        if (lr < 0.0) throw ConfigError("lr must be >= 0");
        if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
        if (w_coarse < 0.0 || w_fine < 0.0 || w_prune < 0.0)
            throw ConfigError("loss weights must be >= 0");
        if (image_size % 32 != 0) throw ConfigError("image_size must be divisible by 32");
    }

    // Full-precision snapshot, e.g. for embedding in a checkpoint manifest.
    std::map<std::string, std::string> snapshot() const {
        auto real = [](double v) {
            std::ostringstream os;
            os.precision(17);
            os << v;
            return os.str();
        };
        std::map<std::string, std::string> m;
        m["preset"] = preset;
        m["c_coarse"] = std::to_string(c_coarse);
        m["c_fine"] = std::to_string(c_fine);
        m["mpm_layers"] = std::to_string(mpm_layers);
        m["heads"] = std::to_string(heads);
        m["theta_p"] = real(theta_p);
        m["theta_c"] = real(theta_c);
        m["tau"] = real(tau);
        m["refine_window"] = std::to_string(refine_window);
        m["lr"] = real(lr);
        m["weight_decay"] = real(weight_decay);
        m["w_coarse"] = real(w_coarse);
        m["w_fine"] = real(w_fine);
        m["w_prune"] = real(w_prune);
        m["batch"] = std::to_string(batch);
        m["steps"] = std::to_string(steps);
        m["pairs"] = std::to_string(pairs);
        m["image_size"] = std::to_string(image_size);
        m["seed"] = std::to_string(seed);
        m["dataset"] = dataset;
        m["log_every"] = std::to_string(log_every);
        m["checkpoint_every"] = std::to_string(checkpoint_every);
        return m;
    }

    // Rebuild from a snapshot map. `preset` is applied first so the explicit
    // per-key values stored alongside it win, exactly as in a file.
    static Config from_snapshot(const std::map<std::string, std::string>& m) {
        Config c;
        auto p = m.find("preset");
        if (p != m.end()) c.apply_preset(p->second);
        for (const auto& [k, v] : m)
            if (k != "preset") c.set(k, v);
        c.validate();
        return c;
    }
};

namespace config_detail {

inline std::string strip(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

}  // namespace config_detail

// Parse key=value text. The environment variable PRISM_SEED, when set,
// overrides whatever seed the text specified.
inline Config parse_config_text(const std::string& text, bool env_override = true) {
    Config cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = config_detail::strip(line);
        if (line.empty()) continue;
        std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
        std::string key = config_detail::strip(line.substr(0, eq));
        std::string value = config_detail::strip(line.substr(eq + 1));
        if (key.empty())
            throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
        cfg.set(key, value);
    }
    if (env_override) {
        if (const char* env = std::getenv("PRISM_SEED")) cfg.set("seed", env);
    }
    cfg.validate();
    return cfg;
}

inline Config load_config(const std::string& path, bool env_override = true) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open config file: " + path);
    std::ostringstream buf;
    buf << f.rdbuf();
    return parse_config_text(buf.str(), env_override);
}

}  // namespace prism
