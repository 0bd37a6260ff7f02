#include "boxseg/config.hpp"

#include <set>

namespace boxseg {

namespace {

class Reader {
public:
    Reader(const Json& j, std::string context) : j_(j), context_(std::move(context)) {
        if (!j_.is_object()) throw ConfigError(context_ + ": expected an object");
    }

    template <typename T>
    void get(const std::string& key, T& out) {
        known_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError(path(key) + ": wrong type");
        }
    }

    /// Reads a string key through a parser that throws on unknown values.
    template <typename T, typename Parse>
    void get_enum(const std::string& key, T& out, Parse parse) {
        std::string name;
        get(key, name);
        if (!j_.contains(key)) return;
        try {
            out = parse(name);
        } catch (const Error& e) {
            throw ConfigError(path(key) + ": " + e.what());
        }
    }

    const Json* child(const std::string& key) {
        known_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

    std::string path(const std::string& key) const { return context_ + "." + key; }

    void finish() const {
        for (const auto& item : j_.items())
            if (!known_.count(item.key())) throw ConfigError("unknown key " + path(item.key()));
    }

private:
    const Json& j_;
    std::string context_;
    std::set<std::string> known_;
};

Json range_json(const IntensityRange& r) { return Json::array({r.lo, r.hi}); }

IntensityRange range_from_json(const Json& j, const std::string& where) {
    if (!j.is_array() || j.size() != 2 || !j[0].is_number() || !j[1].is_number())
        throw ConfigError(where + ": expected [lo, hi]");
    return {j[0].get<float>(), j[1].get<float>()};
}

template <typename F>
void validated(const std::string& context, F&& check) {
    try {
        check();
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(context + ": " + e.what());
    }
}

}  // namespace

Json load_json_file(const std::filesystem::path& path) {
    const std::string text = read_file(path);
    try {
        return Json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

Json to_json(const SynthConfig& cfg) {
    Json shapes = Json::array();
    for (const auto& kinds : cfg.class_shapes) {
        Json names = Json::array();
        for (ShapeKind k : kinds) names.push_back(to_string(k));
        shapes.push_back(names);
    }
    Json class_fg = Json::array();
    for (const IntensityRange& r : cfg.class_foreground) class_fg.push_back(range_json(r));
    return Json{{"canvas", cfg.canvas},
                {"channels", cfg.channels},
                {"class_shapes", shapes},
                {"min_objects", cfg.min_objects},
                {"max_objects", cfg.max_objects},
                {"min_side", cfg.min_side},
                {"max_side", cfg.max_side},
                {"background", range_json(cfg.background)},
                {"foreground", range_json(cfg.foreground)},
                {"class_foreground", class_fg},
                {"noise", cfg.noise},
                {"allow_overlap", cfg.allow_overlap},
                {"samples", cfg.samples},
                {"seed", cfg.seed}};
}

SynthConfig synth_config_from_json(const Json& j) {
    SynthConfig cfg;
    Reader r(j, "synth");
    r.get("canvas", cfg.canvas);
    r.get("channels", cfg.channels);
    if (const Json* shapes = r.child("class_shapes")) {
        if (!shapes->is_array()) throw ConfigError(r.path("class_shapes") + ": expected a list of shape lists");
        cfg.class_shapes.clear();
        for (const Json& kinds : *shapes) {
            std::vector<ShapeKind> list;
            const Json items = kinds.is_string() ? Json::array({kinds}) : kinds;
            if (!items.is_array()) throw ConfigError(r.path("class_shapes") + ": expected a list of shape lists");
            for (const Json& name : items) {
                if (!name.is_string()) throw ConfigError(r.path("class_shapes") + ": shape names must be strings");
                try {
                    list.push_back(shape_kind_from_string(name.get<std::string>()));
                } catch (const Error& e) {
                    throw ConfigError(r.path("class_shapes") + ": " + e.what());
                }
            }
            cfg.class_shapes.push_back(std::move(list));
        }
    }
    r.get("min_objects", cfg.min_objects);
    r.get("max_objects", cfg.max_objects);
    r.get("min_side", cfg.min_side);
    r.get("max_side", cfg.max_side);
    if (const Json* b = r.child("background")) cfg.background = range_from_json(*b, r.path("background"));
    if (const Json* f = r.child("foreground")) cfg.foreground = range_from_json(*f, r.path("foreground"));
    if (const Json* cf = r.child("class_foreground")) {
        if (!cf->is_array()) throw ConfigError(r.path("class_foreground") + ": expected a list of [lo, hi]");
        for (const Json& item : *cf) cfg.class_foreground.push_back(range_from_json(item, r.path("class_foreground")));
    }
    r.get("noise", cfg.noise);
    r.get("allow_overlap", cfg.allow_overlap);
    r.get("samples", cfg.samples);
    r.get("seed", cfg.seed);
    r.finish();
    validated("synth", [&] { cfg.validate(); });
    return cfg;
}

Json to_json(const CrfParams& p) {
    return Json{{"iterations", p.iterations},   {"w_appearance", p.w_appearance}, {"theta_alpha", p.theta_alpha},
                {"theta_beta", p.theta_beta},   {"w_smooth", p.w_smooth},         {"theta_gamma", p.theta_gamma},
                {"p_fg", p.p_fg}};
}

CrfParams crf_params_from_json(const Json& j) {
    CrfParams p;
    Reader r(j, "crf");
    r.get("iterations", p.iterations);
    r.get("w_appearance", p.w_appearance);
    r.get("theta_alpha", p.theta_alpha);
    r.get("theta_beta", p.theta_beta);
    r.get("w_smooth", p.w_smooth);
    r.get("theta_gamma", p.theta_gamma);
    r.get("p_fg", p.p_fg);
    r.finish();
    validated("crf", [&] { p.validate(); });
    return p;
}

Json to_json(const TrainConfig& c) {
    return Json{{"name", c.name},
                {"supervision", to_string(c.supervision)},
                {"fr",
                 {{"mode", to_string(c.fr.mode)},
                  {"global_rate", c.fr.global_rate},
                  {"ranking_base", to_string(c.fr.ranking_base)}}},
                {"attention", to_string(c.attention)},
                {"lambda", c.lambda},
                {"iterations", c.iterations},
                {"base_lr", c.base_lr},
                {"lr_decay", c.lr_decay},
                {"lr_step", c.lr_step},
                {"momentum", c.momentum},
                {"batch_size", c.batch_size},
                {"seed", c.seed},
                {"hflip", c.hflip},
                {"crop_pad", c.crop_pad},
                {"semi_fraction", c.semi_fraction},
                {"branch_width", c.branch_width},
                {"fr_warmup", c.fr_warmup}};
}

void apply_train_config(const Json& j, TrainConfig& c) {
    Reader r(j, "train");
    r.get("name", c.name);
    r.get_enum("supervision", c.supervision, supervision_from_string);
    if (const Json* fr = r.child("fr")) {
        Reader f(*fr, "train.fr");
        f.get_enum("mode", c.fr.mode, fr_mode_from_string);
        f.get("global_rate", c.fr.global_rate);
        f.get_enum("ranking_base", c.fr.ranking_base, ranking_base_from_string);
        f.finish();
    }
    r.get_enum("attention", c.attention, attention_mode_from_string);
    r.get("lambda", c.lambda);
    r.get("iterations", c.iterations);
    r.get("base_lr", c.base_lr);
    r.get("lr_decay", c.lr_decay);
    r.get("lr_step", c.lr_step);
    r.get("momentum", c.momentum);
    r.get("batch_size", c.batch_size);
    r.get("seed", c.seed);
    r.get("hflip", c.hflip);
    r.get("crop_pad", c.crop_pad);
    r.get("semi_fraction", c.semi_fraction);
    r.get("branch_width", c.branch_width);
    r.get("fr_warmup", c.fr_warmup);
    r.finish();
    validated("train", [&] { c.validate(); });
}

TrainConfig train_config_from_json(const Json& j) {
    TrainConfig c;
    apply_train_config(j, c);
    return c;
}

std::vector<TrainConfig> AblationSpec::grid() const {
    if (rows.empty()) return standard_ablation_grid(base);
    std::vector<TrainConfig> out;
    for (const Json& row : rows) {
        if (row.is_string()) {
            validated("ablation.rows", [&] { out.push_back(ablation_row(row.get<std::string>(), base)); });
            continue;
        }
        if (!row.is_object() || !row.contains("row") || !row.at("row").is_string())
            throw ConfigError("ablation.rows: each row is a name or an object with a \"row\" name");
        TrainConfig cfg;
        validated("ablation.rows", [&] { cfg = ablation_row(row.at("row").get<std::string>(), base); });
        Json overrides = row;
        overrides.erase("row");
        apply_train_config(overrides, cfg);
        out.push_back(cfg);
    }
    return out;
}

Json to_json(const AblationSpec& s) {
    return Json{{"base", to_json(s.base)}, {"rows", s.rows},       {"seeds", s.seeds},
                {"crf", to_json(s.crf)},   {"k", s.k},             {"cluster_seed", s.cluster_seed},
                {"train_count", s.train_count}};
}

AblationSpec ablation_spec_from_json(const Json& j) {
    AblationSpec s;
    Reader r(j, "ablation");
    if (const Json* base = r.child("base")) s.base = train_config_from_json(*base);
    if (const Json* rows = r.child("rows")) {
        if (!rows->is_array()) throw ConfigError(r.path("rows") + ": expected a list");
        s.rows = *rows;
    }
    r.get("seeds", s.seeds);
    if (const Json* crf = r.child("crf")) s.crf = crf_params_from_json(*crf);
    r.get("k", s.k);
    r.get("cluster_seed", s.cluster_seed);
    r.get("train_count", s.train_count);
    r.finish();
    if (s.seeds.empty()) throw ConfigError("ablation.seeds: at least one seed required");
    if (s.k < 1) throw ConfigError("ablation.k: must be positive");
    if (s.train_count < 1) throw ConfigError("ablation.train_count: must be positive");
    s.grid();
    return s;
}

std::uint64_t fingerprint(const Json& j) { return fnv1a(j.dump()); }

}  // namespace boxseg
