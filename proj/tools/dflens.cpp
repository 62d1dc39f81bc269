// dflens: train the toy denoiser, generate along time-step plans, explain
// steps with DF-RISE / DF-CAM and score explanations.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dflens/dflens.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dflens;

namespace {

constexpr int kSchemaVersion = 1;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string dashed(std::string key) {
  for (char& c : key) c = c == '_' ? '-' : c;
  return key;
}

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != ' ') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

// Converts a flag's text to the JSON type of the parameter's default.
json parse_like(const json& like, const std::string& key, const std::string& text) {
  auto bad = [&] { return UsageError("--" + dashed(key) + ": cannot parse '" + text + "'"); };
  auto scalar = [&](const json& kind, const std::string& s) -> json {
    std::size_t used = 0;
    try {
      if (kind.is_number_integer()) {
        const long long v = std::stoll(s, &used);
        if (used != s.size()) throw bad();
        return v;
      }
      if (kind.is_number()) {
        const double v = std::stod(s, &used);
        if (used != s.size()) throw bad();
        return v;
      }
    } catch (const std::logic_error&) {
      throw bad();
    }
    return s;
  };
  if (like.is_array()) {
    json out = json::array();
    for (const auto& part : split(text)) out.push_back(scalar(like.at(0), part));
    return out;
  }
  return scalar(like, text);
}

bool same_kind(const json& like, const json& v) {
  if (like.is_number_integer()) return v.is_number_integer();
  if (like.is_number()) return v.is_number();
  if (like.is_array()) {
    if (!v.is_array() || v.empty()) return false;
    for (const auto& e : v) {
      if (!same_kind(like.at(0), e)) return false;
    }
    return true;
  }
  return like.type() == v.type();
}

struct Param {
  std::string key;
  json value;
  std::string text;
  bool flag = false;
  CLI::Option* option = nullptr;
};

/// A subcommand whose parameters resolve as defaults, then --config file
/// values, then explicit flags.
class Command {
 public:
  using Handler = std::function<void(const json&)>;

  Command(CLI::App& root, const std::string& name, const std::string& help, Handler handler)
      : name_(name), handler_(std::move(handler)) {
    app_ = root.add_subcommand(name, help);
    app_->add_option("--config", config_path_, "JSON config file (flags override its values)");
  }

  Command& param(const std::string& key, json def, const std::string& help) {
    Param& p = params_.emplace_back(Param{key, std::move(def)});
    const std::string flag = "--" + dashed(key);
    if (p.value.is_boolean()) {
      p.option = app_->add_flag(flag, p.flag, help);
    } else {
      p.option = app_->add_option(flag, p.text, help)->default_str(p.value.is_string() ? p.value.get<std::string>()
                                                                                       : p.value.dump());
    }
    return *this;
  }

  // Shared by every command.
  Command& common() {
    const char* env = std::getenv("DFLENS_SEED");
    json seed = 0;
    if (env && *env) seed = parse_like(json(0), "seed", env);
    param("out", "", "output directory");
    param("seed", seed, "random seed (default from DFLENS_SEED, else 0)");
    param("workers", static_cast<long long>(default_workers()), "worker threads");
    param("deterministic", false, "fixed combine order (results never depend on --workers)");
    return *this;
  }

  Command& model_params() {
    param("checkpoint", "", "model checkpoint written by train");
    param("schedule", "linear", "noise schedule: linear or cosine");
    param("T", 1000, "diffusion steps the model was trained with");
    return *this;
  }

  Command& plan_params(const std::string& mode) {
    param("mode", mode, "time-step plan: uniform, exp_early or exp_latter");
    param("l", 30, "inference steps");
    param("gamma", 60, "exponential plan offset");
    return *this;
  }

  Command& prompt_params() {
    param("shape", "circle", "condition shape: circle, square or triangle");
    param("color", "red", "condition color: red, green or blue");
    param("quadrant", "tl", "condition quadrant: tl, tr, bl or br");
    return *this;
  }

  CLI::App* app() const { return app_; }
  bool selected() const { return app_->parsed(); }

  json resolve() const {
    json cfg = json::object();
    for (const auto& p : params_) cfg[p.key] = p.value;
    if (!config_path_.empty()) {
      std::ifstream in(config_path_);
      if (!in) throw UsageError("cannot read config file '" + config_path_ + "'");
      json file;
      try {
        file = json::parse(in);
      } catch (const json::exception& e) {
        throw UsageError("config file '" + config_path_ + "' is not valid JSON: " + e.what());
      }
      if (!file.is_object()) throw UsageError("config file must hold a JSON object");
      for (const auto& [key, v] : file.items()) {
        if (key == "schema_version") continue;
        if (key == "command") {
          if (v != name_) throw UsageError("config file is for command '" + v.dump() + "', not '" + name_ + "'");
          continue;
        }
        if (!cfg.contains(key)) throw UsageError("config file: unknown key '" + key + "' for " + name_);
        if (!same_kind(cfg[key], v)) throw UsageError("config file: '" + key + "' has the wrong type");
        cfg[key] = v;
      }
    }
    for (const auto& p : params_) {
      if (p.option->count() == 0) continue;
      cfg[p.key] = p.value.is_boolean() ? json(p.flag) : parse_like(p.value, p.key, p.text);
    }
    if (cfg["workers"].get<long long>() < 1) throw UsageError("--workers must be >= 1");
    cfg["schema_version"] = kSchemaVersion;
    cfg["command"] = name_;
    return cfg;
  }

  void run() const { handler_(resolve()); }

 private:
  std::string name_;
  Handler handler_;
  CLI::App* app_ = nullptr;
  std::string config_path_;
  std::deque<Param> params_;
};

// ---------------------------------------------------------------------------
// Helpers

template <typename F>
auto usage_checked(F&& f) {
  try {
    return f();
  } catch (const dflens::Error& e) {
    throw UsageError(e.what());
  } catch (const json::exception& e) {
    throw UsageError(e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(concat("cannot write '", path.string(), "'"));
  out << text;
  if (!out) throw Error(concat("write to '", path.string(), "' failed"));
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json report(const json& cfg, json body) {
  body["schema_version"] = kSchemaVersion;
  body["command"] = cfg["command"];
  return body;
}

fs::path output_dir(const json& cfg) {
  const auto out = cfg["out"].get<std::string>();
  if (out.empty()) throw UsageError("--out is required");
  return out;
}

void begin(const json& cfg, const fs::path& out) {
  fs::create_directories(out);
  write_json(out / "config.json", cfg);
}

std::string numbered(const char* fmt, long long a, long long b = 0) {
  char buf[96];
  std::snprintf(buf, sizeof buf, fmt, a, b);
  return buf;
}

std::size_t workers_of(const json& cfg) { return static_cast<std::size_t>(cfg["workers"].get<long long>()); }
std::uint64_t seed_of(const json& cfg) { return static_cast<std::uint64_t>(cfg["seed"].get<long long>()); }
int int_of(const json& cfg, const char* key) { return static_cast<int>(cfg[key].get<long long>()); }

std::size_t render_scale(const json& cfg) {
  const int s = int_of(cfg, "render_scale");
  if (s < 1 || s > 64) throw UsageError("--render-scale must lie in [1, 64]");
  return static_cast<std::size_t>(s);
}

NoiseSchedule schedule_of(const json& cfg) {
  return usage_checked([&] { return make_schedule(parse_schedule_kind(cfg["schedule"].get<std::string>()), int_of(cfg, "T")); });
}

TimestepPlan plan_of(const json& cfg, const std::string& mode, int gamma) {
  return usage_checked([&] { return make_plan(parse_plan_mode(mode), int_of(cfg, "T"), int_of(cfg, "l"), gamma); });
}

ConditionTokens prompt_of(const json& cfg) {
  return usage_checked([&] {
    return vocab::make_tokens(cfg["shape"].get<std::string>(), cfg["color"].get<std::string>(),
                              cfg["quadrant"].get<std::string>());
  });
}

Denoiser model_of(const json& cfg) {
  const auto path = cfg["checkpoint"].get<std::string>();
  if (path.empty()) throw UsageError("--checkpoint is required");
  Denoiser model = load_checkpoint(path);
  if (cfg.contains("shape") && model.config().num_tokens != 3) {
    throw Error(concat("checkpoint expects ", model.config().num_tokens, " condition tokens; prompts carry 3"));
  }
  return model;
}

std::optional<MaskGrid> grid_of(const json& cfg) {
  const int g = int_of(cfg, "grid");
  if (g < 0) throw UsageError("--grid must be >= 0");
  if (g == 0) return std::nullopt;
  return MaskGrid{static_cast<std::size_t>(g), static_cast<std::size_t>(g)};
}

std::string layer_of(const json& cfg, const Denoiser& model) {
  std::string layer = cfg["layer"].get<std::string>();
  const auto names = model.layer_names();
  if (layer.empty()) {
    layer = Denoiser::kDefaultCamLayer;
  } else if (std::find(names.begin(), names.end(), layer) == names.end()) {
    throw UsageError("unknown layer '" + layer + "'; available layers: " + layer_list(names));
  }
  return layer;
}

SimilarityConfig metric_of(const json& cfg) {
  SimilarityConfig m;
  m.kind = usage_checked([&] { return parse_similarity_kind(cfg["metric"].get<std::string>()); });
  return m;
}

json tokens_json(const ConditionTokens& c) {
  json names = json::array();
  for (int id : c.ids) names.push_back(std::string(vocab::token_name(id)));
  return names;
}

RgbImage montage(const std::vector<RgbImage>& tiles, std::size_t gap = 2) {
  std::size_t w = 0, h = 0;
  for (const auto& t : tiles) {
    w += t.width + (w ? gap : 0);
    h = std::max(h, t.height);
  }
  RgbImage out(w, h, Rgb{255, 255, 255});
  std::size_t x0 = 0;
  for (const auto& t : tiles) {
    for (std::size_t y = 0; y < t.height; ++y) {
      for (std::size_t x = 0; x < t.width; ++x) out.at(x0 + x, y) = t.at(x, y);
    }
    x0 += t.width + gap;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Commands

void cmd_train(const json& cfg) {
  const fs::path out = output_dir(cfg);
  TrainOptions opt;
  opt.steps = int_of(cfg, "steps");
  opt.batch = int_of(cfg, "batch");
  opt.lr = cfg["lr"].get<double>();
  opt.seed = seed_of(cfg);
  if (opt.steps < 1) throw UsageError("--steps must be >= 1");
  if (opt.batch < 1) throw UsageError("--batch must be >= 1");
  if (!(opt.lr >= 0.0)) throw UsageError("--lr must be >= 0");
  const int dataset_size = int_of(cfg, "dataset_size");
  if (dataset_size < 1) throw UsageError("--dataset-size must be >= 1");
  DenoiserConfig arch;
  arch.image_size = int_of(cfg, "image_size");
  arch.base_width = int_of(cfg, "base_width");
  arch.token_dim = int_of(cfg, "token_dim");
  arch.time_dim = int_of(cfg, "time_dim");
  arch.attn_dim = int_of(cfg, "attn_dim");
  arch.cross_attention = cfg["cross_attention"].get<bool>();
  usage_checked([&] { arch.validate(); });
  const NoiseSchedule schedule = schedule_of(cfg);
  const int log_every = std::max(1, int_of(cfg, "log_every"));

  begin(cfg, out);
  Denoiser model(arch, opt.seed);
  const auto data = sample_dataset(dataset_size, opt.seed, arch.image_size);
  const auto history = train(model, data, schedule, opt, [&](int step, double loss) {
    if ((step + 1) % log_every == 0 || step + 1 == opt.steps) {
      std::fprintf(stderr, "step %d/%d  loss %.5f\n", step + 1, opt.steps, loss);
    }
  });
  save_checkpoint(model, (out / "model.ckpt").string());

  auto window_mean = [&](std::size_t from, std::size_t n) {
    double m = 0.0;
    for (std::size_t i = from; i < from + n; ++i) m += history[i] / static_cast<double>(n);
    return m;
  };
  const std::size_t window = std::min<std::size_t>(100, history.size());
  json body = {{"losses", history},
               {"first_window_mean", window_mean(0, window)},
               {"last_window_mean", window_mean(history.size() - window, window)},
               {"window", window},
               {"dataset_size", dataset_size},
               {"architecture", to_json(arch)}};
  write_json(out / "loss.json", report(cfg, body));

  PlotSeries s{{}, history, series_color(0)};
  double hi = 0.0;
  for (std::size_t i = 0; i < history.size(); ++i) {
    s.x.push_back(history.size() > 1 ? static_cast<double>(i) / static_cast<double>(history.size() - 1) : 0.0);
    hi = std::max(hi, history[i]);
  }
  write_png(plot_curves({s}, 0.0, hi > 0.0 ? hi : 1.0), (out / "loss.png").string());
  std::fprintf(stderr, "wrote %s\n", (out / "model.ckpt").c_str());
}

void cmd_generate(const json& cfg) {
  const fs::path out = output_dir(cfg);
  const NoiseSchedule schedule = schedule_of(cfg);
  const TimestepPlan plan = plan_of(cfg, cfg["mode"].get<std::string>(), int_of(cfg, "gamma"));
  const ConditionTokens cond = prompt_of(cfg);
  const std::size_t scale = render_scale(cfg);
  const bool save_steps = cfg["save_steps"].get<bool>();
  const Denoiser model = model_of(cfg);

  begin(cfg, out);
  const Generation g = generate(model, schedule, plan, cond, seed_of(cfg));
  write_png(upscale(to_rgb(g.image), scale), (out / "image.png").string());
  json steps = json::array();
  if (save_steps) fs::create_directories(out / "steps");
  for (std::size_t i = 0; i < g.steps.size(); ++i) {
    const auto& s = g.steps[i];
    const Tensor x0 = predict_x0(s.x_t, s.t, s.eps_hat, schedule);
    double energy = 0.0;
    for (double v : s.x_t.data()) energy += v * v;
    steps.push_back({{"index", i}, {"t", s.t}, {"x_t_rms", std::sqrt(energy / static_cast<double>(s.x_t.numel()))}});
    if (save_steps) {
      const auto tile = montage({upscale(to_rgb(s.x_t), scale), upscale(to_rgb(x0), scale)});
      write_png(tile, (out / "steps" / numbered("step_%02lld_t%04lld.png", static_cast<long long>(i), s.t)).string());
    }
  }
  json body = {{"mode", to_string(plan.mode)}, {"gamma", int_of(cfg, "gamma")}, {"plan", plan_to_json(plan)},
               {"tokens", tokens_json(cond)},  {"steps", steps},               {"image", g.image.vec()}};
  write_json(out / "trace.json", report(cfg, body));
}

void cmd_sweep_gamma(const json& cfg) {
  const fs::path out = output_dir(cfg);
  const NoiseSchedule schedule = schedule_of(cfg);
  const ConditionTokens cond = prompt_of(cfg);
  const std::size_t scale = render_scale(cfg);
  const std::string mode = cfg["mode"].get<std::string>();
  std::vector<TimestepPlan> plans;
  for (const auto& gamma : cfg["gammas"]) plans.push_back(plan_of(cfg, mode, static_cast<int>(gamma.get<long long>())));
  const Denoiser model = model_of(cfg);

  begin(cfg, out);
  json runs = json::array();
  std::vector<RgbImage> tiles;
  for (std::size_t i = 0; i < plans.size(); ++i) {
    const long long gamma = cfg["gammas"][i].get<long long>();
    const Generation g = generate(model, schedule, plans[i], cond, seed_of(cfg));
    tiles.push_back(upscale(to_rgb(g.image), scale));
    const std::string name = numbered("gamma_%03lld.png", gamma);
    write_png(tiles.back(), (out / name).string());
    runs.push_back({{"gamma", gamma}, {"plan", plan_to_json(plans[i])}, {"image", name}});
  }
  write_png(montage(tiles), (out / "sweep.png").string());
  write_json(out / "sweep.json", report(cfg, {{"mode", mode}, {"tokens", tokens_json(cond)}, {"runs", runs}}));
}

std::vector<std::size_t> step_indices(const json& cfg, std::size_t count) {
  const std::string spec = cfg["steps"].get<std::string>();
  std::vector<std::size_t> idx;
  if (spec == "all") {
    for (std::size_t i = 0; i < count; ++i) idx.push_back(i);
    return idx;
  }
  for (const auto& part : split(spec)) {
    const json v = parse_like(json(0), "steps", part);
    if (v.get<long long>() < 0 || v.get<long long>() >= static_cast<long long>(count)) {
      throw UsageError(concat("--steps: index ", part, " outside the plan's ", count, " steps"));
    }
    idx.push_back(static_cast<std::size_t>(v.get<long long>()));
  }
  return idx;
}

void cmd_explain(const json& cfg) {
  if (cfg["list_layers"].get<bool>()) {
    for (const auto& name : model_of(cfg).layer_names()) std::cout << name << "\n";
    return;
  }
  const fs::path out = output_dir(cfg);
  const NoiseSchedule schedule = schedule_of(cfg);
  const TimestepPlan plan = plan_of(cfg, cfg["mode"].get<std::string>(), int_of(cfg, "gamma"));
  const ConditionTokens cond = prompt_of(cfg);
  const std::size_t scale = render_scale(cfg);
  const auto tool = cfg["tool"].get<std::string>();
  if (tool != "df_rise" && tool != "df_cam") throw UsageError("--tool must be df_rise or df_cam");
  const SimilarityConfig metric = metric_of(cfg);
  const double alpha = cfg["alpha"].get<double>();
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw UsageError("--alpha must lie in [0, 1]");
  const int n_masks = int_of(cfg, "masks");
  const double keep_prob = cfg["keep_prob"].get<double>();
  if (n_masks < 1) throw UsageError("--masks must be >= 1");
  if (!(keep_prob > 0.0 && keep_prob < 1.0)) throw UsageError("--keep-prob must lie in (0, 1)");
  const auto grid = grid_of(cfg);
  const auto indices = step_indices(cfg, plan.steps.size());
  const Denoiser model = model_of(cfg);
  std::string layer;
  if (tool == "df_cam") {
    layer = layer_of(cfg, model);
    if (cfg["layer"].get<std::string>().empty()) {
      std::fprintf(stderr, "using layer %s (available: %s)\n", layer.c_str(), layer_list(model.layer_names()).c_str());
    }
  }

  begin(cfg, out);
  const Generation g = generate(model, schedule, plan, cond, seed_of(cfg));
  const std::size_t h = model.input_shape()[1], w = model.input_shape()[2];
  json maps = json::array();
  for (std::size_t i : indices) {
    const auto& s = g.steps[i];
    SaliencyMap map;
    if (tool == "df_rise") {
      // one mask batch per step, keyed by the step index
      const auto masks = generate_masks(static_cast<std::size_t>(n_masks), h, w, keep_prob,
                                        seed_of(cfg) * 1000003ULL + i, grid);
      map = df_rise(model, s.x_t, s.t, cond, masks, metric, workers_of(cfg));
    } else {
      map = df_cam(model, s.x_t, s.t, cond, layer);
    }
    const RgbImage base = to_rgb(predict_x0(s.x_t, s.t, s.eps_hat, schedule));
    const std::string stem = numbered("step_%02lld_t%04lld", static_cast<long long>(i), s.t);
    write_png(upscale(render_heatmap(map.values, base, alpha), scale), (out / (stem + "_overlay.png")).string());
    json raw = to_json(map);
    raw["index"] = i;
    write_json(out / (stem + "_map.json"), report(cfg, raw));
    maps.push_back({{"index", i}, {"t", s.t}, {"overlay", stem + "_overlay.png"}, {"map", stem + "_map.json"}});
    std::fprintf(stderr, "explained step %zu (t=%d)\n", i, s.t);
  }
  json body = {{"tool", tool}, {"plan", plan_to_json(plan)}, {"tokens", tokens_json(cond)}, {"maps", maps}};
  if (!layer.empty()) body["layer"] = layer;
  write_json(out / "explain.json", report(cfg, body));
}

void cmd_eval(const json& cfg) {
  const fs::path out = output_dir(cfg);
  const NoiseSchedule schedule = schedule_of(cfg);
  EvalOptions opt;
  opt.seeds = int_of(cfg, "seeds");
  opt.seed = seed_of(cfg);
  opt.t = int_of(cfg, "t");
  opt.orderings = cfg["orderings"].get<std::vector<std::string>>();
  opt.games.clear();
  for (const auto& g : cfg["games"]) opt.games.push_back(usage_checked([&] { return parse_game(g.get<std::string>()); }));
  opt.masks = int_of(cfg, "masks");
  opt.keep_prob = cfg["keep_prob"].get<double>();
  opt.grid = grid_of(cfg);
  opt.metric = metric_of(cfg);
  opt.perturb_steps = int_of(cfg, "perturb_steps");
  opt.workers = workers_of(cfg);
  if (opt.perturb_steps < 2) throw UsageError("--perturb-steps must be >= 2");
  if (opt.t < 0 || opt.t >= schedule.T) throw UsageError(concat("--t must lie in [0, ", schedule.T - 1, "]"));
  usage_checked([&] { opt.validate(); });
  const Denoiser model = model_of(cfg);
  opt.layer = layer_of(cfg, model);

  begin(cfg, out);
  const EvalReport r = run_eval(model, schedule, opt, [&](int k) { std::fprintf(stderr, "seed %d/%d done\n", k + 1, opt.seeds); });
  json body = to_json(r);
  json colors = json::object();
  for (std::size_t i = 0; i < opt.orderings.size(); ++i) {
    const Rgb c = series_color(i);
    colors[opt.orderings[i]] = {c.r, c.g, c.b};
  }
  body["plot_colors"] = colors;
  write_json(out / "eval.json", report(cfg, body));
  for (const auto& [game, per] : r.games) {
    std::vector<PlotSeries> series;
    for (std::size_t i = 0; i < opt.orderings.size(); ++i) {
      series.push_back({r.fractions, per.at(opt.orderings[i]).mean_curve, series_color(i)});
    }
    write_png(plot_curves(series, -1.0, 1.0), (out / (game + ".png")).string());
  }
  for (const auto& [game, per] : r.games) {
    for (const auto& name : opt.orderings) {
      const auto& s = per.at(name);
      std::printf("%-9s %-9s auc %.4f +- %.4f", game.c_str(), name.c_str(), s.mean, s.std);
      if (s.wins_vs_random >= 0) std::printf("  beats random %d/%d", s.wins_vs_random, opt.seeds);
      std::printf("\n");
    }
  }
}

void cmd_quantify(const json& cfg) {
  const fs::path out = output_dir(cfg);
  const NoiseSchedule schedule = schedule_of(cfg);
  const ConditionTokens cond = prompt_of(cfg);
  std::vector<TimestepPlan> plans;
  for (const auto& m : cfg["modes"]) plans.push_back(plan_of(cfg, m.get<std::string>(), int_of(cfg, "gamma")));
  const Denoiser model = model_of(cfg);
  if (!model.config().cross_attention) throw Error("checkpoint has no cross-attention block; nothing to quantify");

  begin(cfg, out);
  json profiles = json::array();
  for (const auto& plan : plans) {
    const RelevanceProfile r = concept_relevance(model, schedule, cond, plan, seed_of(cfg));
    profiles.push_back(to_json(r));
    std::vector<PlotSeries> series;
    std::vector<double> x;
    for (std::size_t s = 0; s < r.timesteps.size(); ++s) {
      x.push_back(r.timesteps.size() > 1 ? static_cast<double>(s) / static_cast<double>(r.timesteps.size() - 1) : 0.0);
    }
    for (std::size_t k = 0; k < r.scores.size(); ++k) series.push_back({x, r.scores[k], series_color(k)});
    write_png(plot_curves(series, 0.0, 1.0), (out / ("relevance_" + to_string(plan.mode) + ".png")).string());
    std::printf("%-10s", to_string(plan.mode).c_str());
    for (std::size_t k = 0; k < r.totals.size(); ++k) {
      std::printf("  %s %.3f", std::string(vocab::token_name(r.token_ids[k])).c_str(), r.totals[k]);
    }
    std::printf("\n");
  }
  write_json(out / "relevance.json",
             report(cfg, {{"method", "cross_attention_proxy"}, {"gamma", int_of(cfg, "gamma")}, {"profiles", profiles}}));
}

void cmd_dataset_dump(const json& cfg) {
  const fs::path out = output_dir(cfg);
  const int count = int_of(cfg, "count");
  const int size = int_of(cfg, "image_size");
  const std::size_t scale = render_scale(cfg);
  if (count < 1) throw UsageError("--count must be >= 1");
  const auto data = usage_checked([&] { return sample_dataset(count, seed_of(cfg), size); });

  begin(cfg, out);
  json scenes = json::array();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::string name = numbered("sample_%03lld.png", static_cast<long long>(i));
    write_png(upscale(to_rgb(data[i].image), scale), (out / name).string());
    json s = scene_to_json(data[i].scene);
    s["image"] = name;
    scenes.push_back(s);
  }
  write_json(out / "dataset.json", report(cfg, {{"image_size", size}, {"samples", scenes}}));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Saliency maps and time-step sampling for a toy conditional diffusion model"};
  app.require_subcommand(1);
  std::deque<Command> commands;

  auto& train_cmd = commands.emplace_back(app, "train", "train a denoiser on the synthetic shapes dataset", cmd_train);
  train_cmd.common()
      .param("steps", 2000, "optimizer steps")
      .param("batch", 4, "batch size")
      .param("lr", 2e-3, "Adam learning rate")
      .param("dataset_size", 512, "synthetic training images")
      .param("image_size", 32, "image side (multiple of 4)")
      .param("base_width", 16, "channels of the first U-Net level")
      .param("token_dim", 32, "condition token embedding size")
      .param("time_dim", 32, "time embedding size (even)")
      .param("attn_dim", 32, "cross-attention key size")
      .param("cross_attention", true, "include the cross-attention block")
      .param("schedule", "linear", "noise schedule: linear or cosine")
      .param("T", 1000, "diffusion steps")
      .param("log_every", 100, "progress line interval");

  auto& gen = commands.emplace_back(app, "generate", "generate an image along a time-step plan", cmd_generate);
  gen.common().model_params().plan_params("uniform").prompt_params();
  gen.param("save_steps", false, "also write every step's latent and clean estimate")
      .param("render_scale", 4, "nearest-neighbour upscaling of written images");

  auto& sweep = commands.emplace_back(app, "sweep-gamma", "generate once per exponential offset", cmd_sweep_gamma);
  sweep.common().model_params().plan_params("exp_early").prompt_params();
  sweep.param("gammas", json::array({0, 30, 60, 90}), "comma-separated offsets")
      .param("render_scale", 4, "nearest-neighbour upscaling of written images");

  auto& explain = commands.emplace_back(app, "explain", "saliency maps for steps of a generation", cmd_explain);
  explain.common().model_params().plan_params("uniform").prompt_params();
  explain.param("tool", "df_rise", "df_rise or df_cam")
      .param("steps", "all", "plan step indices to explain (comma-separated) or all")
      .param("masks", 2000, "DF-RISE mask count")
      .param("keep_prob", 0.5, "DF-RISE mask keep probability")
      .param("grid", 0, "coarse mask grid side (0 = per pixel)")
      .param("layer", "", "DF-CAM layer (default dec0)")
      .param("list_layers", false, "print the checkpoint's layer names and exit")
      .param("metric", "structure", "DF-RISE similarity: structure, luminance, contrast or cosine")
      .param("alpha", 0.5, "heatmap opacity")
      .param("render_scale", 4, "nearest-neighbour upscaling of written images");

  auto& eval = commands.emplace_back(app, "eval", "deletion / insertion games against baseline orderings", cmd_eval);
  eval.common().model_params();
  eval.param("seeds", 20, "explained inputs (one per seed)")
      .param("t", 200, "noise level of the explained inputs")
      .param("orderings", json::array({"df_rise", "df_cam", "random", "occlusion"}), "orderings to score")
      .param("games", json::array({"deletion", "insertion"}), "games to play")
      .param("masks", 1000, "DF-RISE mask count")
      .param("keep_prob", 0.5, "DF-RISE mask keep probability")
      .param("grid", 0, "coarse mask grid side (0 = per pixel)")
      .param("layer", "", "DF-CAM layer (default dec0)")
      .param("metric", "structure", "game and DF-RISE similarity: structure, luminance, contrast or cosine")
      .param("perturb_steps", 32, "fractions per curve");

  auto& quantify = commands.emplace_back(app, "quantify-concepts", "per-token relevance along generations", cmd_quantify);
  quantify.common().model_params().prompt_params();
  quantify.param("l", 30, "inference steps")
      .param("gamma", 60, "exponential plan offset")
      .param("modes", json::array({"uniform", "exp_early", "exp_latter"}), "plans to compare");

  auto& dump = commands.emplace_back(app, "dataset-dump", "write synthetic samples as PNG", cmd_dataset_dump);
  dump.common().param("count", 16, "samples").param("image_size", 32, "image side").param("render_scale", 4,
                                                                                          "nearest-neighbour upscaling");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  try {
    for (const auto& c : commands) {
      if (c.selected()) c.run();
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
