#include "cli.hpp"

#include <atomic>
#include <chrono>
#include <csignal>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>

#include "CLI11.hpp"
#include "cmrlm/checkpoint.hpp"
#include "cmrlm/errors.hpp"
#include "cmrlm/inference.hpp"
#include "cmrlm/io.hpp"
#include "cmrlm/measure.hpp"
#include "cmrlm/phantom.hpp"
#include "cmrlm/protocol.hpp"
#include "cmrlm/server.hpp"
#include "cmrlm/trainer.hpp"

namespace cmrlm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) { return std::chrono::duration<double, std::milli>(Clock::now() - t0).count(); }

// Flag values that fail validation are usage errors, not runtime failures.
template <class Fn>
auto as_usage(Fn fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
}

std::vector<View> parse_views(const std::string& list) {
  std::vector<View> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(parse_view(item));
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

// ---- phantom-gen -----------------------------------------------------------

struct PhantomArgs {
  std::string out;
  int n = 200;
  std::string mix = "1,1,1,1";
  std::string contrast = "cine";
  std::uint64_t seed = 0;
  int series = 0;
  int frames = 30;
};

int cmd_phantom(const PhantomArgs& a, std::ostream& out) {
  const Contrast contrast = as_usage([&] {
    if (a.contrast == "cine") return Contrast::Cine;
    if (a.contrast == "inverted") return Contrast::Inverted;
    throw ConfigError("--contrast must be cine or inverted");
  });
  if (a.series > 0) {
    if (a.frames < 2) throw UsageError("--frames must be at least 2");
    const DatasetManifest m = gen_series_dataset(a.series, a.frames, contrast, a.seed, a.out);
    out << "wrote " << m.samples.size() << " frames in " << a.series << " series to " << a.out << "\n";
    return 0;
  }
  std::array<int, 4> weights{};
  as_usage([&] {
    std::stringstream ss(a.mix);
    std::string item;
    std::size_t k = 0;
    while (std::getline(ss, item, ',')) {
      if (k >= 4) throw ConfigError("--mix takes four weights (CH2,CH3,CH4,SAX)");
      try {
        weights[k++] = std::stoi(item);
      } catch (const std::exception&) {
        throw ConfigError("--mix: '" + item + "' is not an integer");
      }
    }
    if (k != 4) throw ConfigError("--mix takes four weights (CH2,CH3,CH4,SAX)");
    view_schedule(1, weights);
    if (a.n < 1) throw ConfigError("--n must be at least 1");
    return 0;
  });
  const DatasetManifest m = gen_dataset(a.n, weights, contrast, a.seed, a.out);
  out << "wrote " << m.samples.size() << " samples to " << a.out << "\n";
  return 0;
}

// ---- train / finetune --------------------------------------------------------

struct TrainArgs {
  std::string data;
  std::string out;
  std::string base;  // finetune only
  bool desk = false;
  std::optional<double> lr;
  std::optional<int> epochs;
  std::optional<int> batch;
  std::optional<int> frame;
  std::string views;
  bool mixed_views = false;
  std::uint64_t seed = 0;
  int threads = 1;
  double train_frac = 0.9;
  bool no_augment = false;
  std::optional<double> sigma;
  std::optional<double> tau;
};

void apply_overrides(TrainConfig& c, const TrainArgs& a) {
  if (a.lr) c.lr = *a.lr;
  if (a.epochs) c.epochs = *a.epochs;
  if (a.batch) c.batch_size = *a.batch;
  if (a.frame) c.frame_size = *a.frame;
  if (!a.views.empty()) c.views = parse_views(a.views);
  if (a.mixed_views) c.mixed_views = true;
  if (a.no_augment) c.augment = false;
  if (a.sigma) c.sigma = *a.sigma;
  if (a.tau) c.tau = *a.tau;
  c.seed = a.seed;
  c.threads = a.threads;
  c.train_fraction = a.train_frac;
}

int run_training(const TrainConfig& config, const TrainArgs& a, const ModelCheckpoint* base, std::ostream& out) {
  const DatasetManifest manifest = read_manifest(a.data);
  if (config.views.empty() && !config.mixed_views) {
    bool lax = false, sax = false;
    for (const auto& s : manifest.samples) (is_lax(s.view) ? lax : sax) = true;
    if (lax && sax) throw UsageError("data mixes long- and short-axis views; pass --views or --mixed-views");
  }
  const auto [train_m, val_m] = split_patients(manifest, config.train_fraction, config.seed);
  const bool need_corrected = config.augment && config.augmentation.p_corrected > 0;
  const auto train_set = load_samples(train_m, config.views, config.frame_size, need_corrected);
  const auto val_set = load_samples(val_m, config.views, config.frame_size, false);
  out << "train " << train_set.size() << " samples, validation " << val_set.size() << " samples\n";

  const fs::path dir = a.out;
  fs::create_directories(dir);
  json split = {{"train", json::array()}, {"val", json::array()}};
  for (const auto& s : train_m.samples) split["train"].push_back(s.image);
  for (const auto& s : val_m.samples) split["val"].push_back(s.image);
  write_text(dir / "split.json", split.dump(2) + "\n");
  write_text(dir / "config.json", config.to_json().dump(2) + "\n");

  TrainHistory running;
  const auto t0 = Clock::now();
  auto on_epoch = [&](const EpochRecord& r, const UNet<float>& model, bool is_best) {
    running.epochs.push_back(r);
    write_text(dir / "history.csv", running.to_csv());
    ModelCheckpoint last;
    last.model = model;
    last.provenance.config_digest = config_digest(config.to_json());
    last.provenance.epoch = r.epoch;
    last.provenance.val_loss = r.val_loss;
    last.provenance.has_val_loss = true;
    last.provenance.settings = {{"frame_size", config.frame_size},
                                {"sigma", config.sigma},
                                {"tau", config.tau},
                                {"config", config.to_json()}};
    save_checkpoint(last, dir / "last.ckpt");
    if (is_best) save_checkpoint(last, dir / "model.ckpt");
    out << "epoch " << r.epoch << "  train " << std::setprecision(5) << r.train_loss << "  val " << r.val_loss
        << "  lr " << r.lr << (is_best ? "  *" : "") << "  (" << std::setprecision(3) << ms_since(t0) / 1000
        << " s)\n"
        << std::flush;
  };
  const TrainResult result = base ? fine_tune(*base, config, train_set, val_set, on_epoch)
                                  : train(config, train_set, val_set, on_epoch);
  write_text(dir / "history.csv", result.history.to_csv());
  save_checkpoint(result.checkpoint, dir / "model.ckpt");
  out << "best epoch " << result.history.best_epoch << ", checkpoint " << (dir / "model.ckpt").string() << "\n";
  return 0;
}

int cmd_train(const TrainArgs& a, std::ostream& out) {
  const TrainConfig config = as_usage([&] {
    TrainConfig c = a.desk ? TrainConfig::desk() : TrainConfig{};
    apply_overrides(c, a);
    c.validate();
    return c;
  });
  return run_training(config, a, nullptr, out);
}

int cmd_finetune(const TrainArgs& a, std::ostream& out) {
  const ModelCheckpoint base = load_checkpoint(a.base);
  const TrainConfig config = as_usage([&] {
    const auto& s = base.provenance.settings;
    TrainConfig c = s.contains("config") ? TrainConfig::from_json(s["config"]) : TrainConfig{};
    c.arch = base.model.arch();
    c.frame_size = s.value("frame_size", c.frame_size);
    c = c.finetune();
    apply_overrides(c, a);
    c.validate();
    return c;
  });
  return run_training(config, a, &base, out);
}

// ---- infer / eval ------------------------------------------------------------

struct Predictions {
  DatasetManifest manifest;  // predicted landmarks in the truth manifest's layout
  std::vector<std::optional<double>> lengths;
  std::map<std::string, SeriesSummary> series;
};

Predictions predict_all(const LandmarkDetector& det, const DatasetManifest& truth, std::ostream& out, bool verbose) {
  Predictions p;
  p.manifest.root = truth.root;
  std::map<std::string, SeriesTracker> trackers;
  std::map<std::string, double> series_ms;
  std::vector<std::string> series_order;
  for (const auto& s : truth.samples) {
    Image img = read_image(truth.image_path(s));
    img.spacing_row = s.spacing_row;
    img.spacing_col = s.spacing_col;
    const auto t0 = Clock::now();
    const LandmarkSet set = det.detect(img, s.view);
    const double ms = ms_since(t0);
    ManifestSample pred = s;
    pred.points = set.points;
    p.manifest.samples.push_back(pred);
    p.lengths.push_back(maybe_lv_length(set));
    if (verbose) {
      out << s.image << "  " << view_name(s.view) << "  " << set.present_count() << "/" << kSlots << " landmarks  "
          << std::fixed << std::setprecision(1) << ms << " ms\n"
          << std::defaultfloat;
    }
    if (!s.series_id.empty()) {
      if (!trackers.count(s.series_id)) series_order.push_back(s.series_id);
      trackers[s.series_id].add(s.frame_index, p.lengths.back());
      series_ms[s.series_id] += ms;
    }
  }
  for (const auto& id : series_order) {
    const auto summary = trackers[id].summary();
    out << "series " << id << ": " << std::fixed << std::setprecision(1) << series_ms[id] << " ms total";
    if (summary) {
      p.series[id] = *summary;
      out << ", ED " << summary->ed_length_mm << " mm (frame " << summary->ed_frame << "), ES "
          << summary->es_length_mm << " mm (frame " << summary->es_frame << "), shortening "
          << summary->shortening_pct << " %";
    }
    out << "\n" << std::defaultfloat;
  }
  return p;
}

int cmd_infer(const std::string& model, const std::string& data, const std::string& out_path, std::ostream& out) {
  const LandmarkDetector det(load_checkpoint(model));
  const DatasetManifest truth = read_manifest(data);
  const Predictions p = predict_all(det, truth, out, true);
  json j = p.manifest.to_json();
  for (std::size_t i = 0; i < p.lengths.size(); ++i) {
    j["samples"][i]["lv_length_mm"] = p.lengths[i] ? json(*p.lengths[i]) : json(nullptr);
  }
  j["series"] = json::object();
  for (const auto& [id, s] : p.series) j["series"][id] = s.to_json();
  // Image paths stay relative to the input manifest.
  j["image_root"] = fs::absolute(truth.root).string();
  if (fs::path(out_path).has_parent_path()) fs::create_directories(fs::path(out_path).parent_path());
  write_text(out_path, j.dump(2) + "\n");
  out << "wrote " << out_path << "\n";
  return 0;
}

int cmd_eval(const std::string& data, const std::string& pred_path, const std::string& model, const std::string& dir,
             std::ostream& out) {
  if (pred_path.empty() == model.empty()) throw UsageError("eval needs exactly one of --pred or --model");
  const DatasetManifest truth = read_manifest(data);
  DatasetManifest pred;
  if (!pred_path.empty()) {
    pred = read_manifest(pred_path);
  } else {
    pred = predict_all(LandmarkDetector(load_checkpoint(model)), truth, out, false).manifest;
  }
  if (pred.samples.size() != truth.samples.size()) {
    throw ConfigError("predictions hold " + std::to_string(pred.samples.size()) + " samples, truth holds " +
                      std::to_string(truth.samples.size()));
  }
  std::vector<LandmarkSet> p, t;
  std::vector<std::string> seq;
  for (std::size_t i = 0; i < truth.samples.size(); ++i) {
    const auto& ts = truth.samples[i];
    const auto& ps = pred.samples[i];
    if (ps.image != ts.image || ps.view != ts.view) {
      throw ConfigError("prediction " + std::to_string(i) + " (" + ps.image + ") does not match truth " + ts.image);
    }
    const Image img = read_image(truth.image_path(ts));
    t.push_back(truth.landmarks(ts, img.height, img.width));
    p.push_back(truth.landmarks(ps, img.height, img.width));
    seq.push_back(ts.sequence);
  }
  const MetricsReport report = build_report(p, t, seq);
  write_report(report, dir);
  out << "detection rate " << std::setprecision(4) << 100.0 * report.detection_rate << " % (" << report.n_success
      << "/" << report.n_tested << "); report in " << dir << "\n";
  return 0;
}

// ---- serve -------------------------------------------------------------------

std::atomic<InferenceServer*> g_server{nullptr};

extern "C" void on_signal(int) {
  if (InferenceServer* s = g_server.load()) s->stop();
}

int cmd_serve(const std::string& model, const std::string& host, int port, std::ostream& out) {
  if (port < 0 || port > 65535) throw UsageError("--port must lie in [0, 65535]");
  auto det = std::make_shared<const LandmarkDetector>(load_checkpoint(model));
  InferenceServer server(det, static_cast<std::uint16_t>(port), host);
  std::mutex log_mu;
  server.set_log([&](const std::string& line) {
    std::lock_guard lock(log_mu);
    out << line << "\n" << std::flush;
  });
  g_server = &server;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  out << "listening on " << host << ":" << server.port() << " (frame " << det->frame_size() << ")\n" << std::flush;
  server.run();
  g_server = nullptr;
  out << "stopped\n";
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  // Callers may pass a long-lived stream; leave its formatting as we found it.
  std::ios saved(nullptr);
  saved.copyfmt(out);
  struct Restore {
    std::ostream& s;
    std::ios& f;
    ~Restore() { s.copyfmt(f); }
  } restore{out, saved};
  CLI::App app{"Cardiac MR landmark detection: phantoms, training, inference, evaluation and serving", "cmrlm"};
  app.require_subcommand(1);

  PhantomArgs ph;
  auto* phantom = app.add_subcommand("phantom-gen", "Write a synthetic phantom dataset (images + manifest.json)");
  phantom->add_option("--out", ph.out, "Output directory")->required();
  phantom->add_option("--n", ph.n, "Number of samples")->capture_default_str();
  phantom->add_option("--mix", ph.mix, "View weights CH2,CH3,CH4,SAX (round-robin)")->capture_default_str();
  phantom->add_option("--contrast", ph.contrast, "cine or inverted")->capture_default_str();
  phantom->add_option("--seed", ph.seed, "Random seed")->capture_default_str();
  phantom->add_option("--series", ph.series, "Write this many long-axis cine series instead")->capture_default_str();
  phantom->add_option("--frames", ph.frames, "Frames per series")->capture_default_str();

  TrainArgs tr;
  auto add_train_flags = [](CLI::App* c, TrainArgs& a, bool finetune) {
    c->add_option("--data", a.data, "Training manifest.json")->required();
    c->add_option("--out", a.out, "Output directory")->required();
    c->add_option("--lr", a.lr, finetune ? "Initial learning rate [0.0005]" : "Initial learning rate [0.001]");
    c->add_option("--epochs", a.epochs, finetune ? "Epochs [10]" : "Epochs [50]");
    c->add_option("--batch", a.batch, "Batch size [8, desk 4]");
    c->add_option("--views", a.views, "Comma-separated views to train on [all present]");
    c->add_flag("--mixed-views", a.mixed_views, "Allow long- and short-axis views in one model");
    c->add_option("--seed", a.seed, "Random seed")->capture_default_str();
    c->add_option("--threads", a.threads, "Batch assembly threads")->capture_default_str();
    c->add_option("--train-frac", a.train_frac, "Patient fraction used for training")->capture_default_str();
    c->add_flag("--no-augment", a.no_augment, "Disable augmentation");
    if (!finetune) {
      c->add_flag("--desk", a.desk, "Desk-scale preset: 4 levels x 1 block, 8 base filters, 128 px frame, batch 4");
      c->add_option("--frame", a.frame, "Network frame size in px [400, desk 128]");
      c->add_option("--sigma", a.sigma, "Heat-map sigma in px [5]");
      c->add_option("--tau", a.tau, "Detection threshold [0.5]");
    }
  };
  auto* train_cmd = app.add_subcommand("train", "Train a model from scratch");
  add_train_flags(train_cmd, tr, false);

  TrainArgs ft;
  auto* finetune_cmd = app.add_subcommand("finetune", "Fine-tune a trained model on a new dataset");
  finetune_cmd->add_option("--base", ft.base, "Base checkpoint")->required();
  add_train_flags(finetune_cmd, ft, true);

  std::string inf_model, inf_data, inf_out = "predictions.json";
  auto* infer_cmd = app.add_subcommand("infer", "Detect landmarks for every image of a manifest");
  infer_cmd->add_option("--model", inf_model, "Checkpoint")->required();
  infer_cmd->add_option("--data", inf_data, "Manifest listing the images")->required();
  infer_cmd->add_option("--out", inf_out, "Predictions file")->capture_default_str();

  std::string ev_data, ev_pred, ev_model, ev_out = "report";
  auto* eval_cmd = app.add_subcommand("eval", "Score predictions against a labelled manifest");
  eval_cmd->add_option("--data", ev_data, "Ground-truth manifest")->required();
  eval_cmd->add_option("--pred", ev_pred, "Predictions file from infer");
  eval_cmd->add_option("--model", ev_model, "Checkpoint to run instead of --pred");
  eval_cmd->add_option("--out", ev_out, "Report directory")->capture_default_str();

  std::string sv_model, sv_host = "127.0.0.1";
  int sv_port = 5555;
  auto* serve_cmd = app.add_subcommand("serve", "Run the inline TCP inference service");
  serve_cmd->add_option("--model", sv_model, "Checkpoint")->required();
  serve_cmd->add_option("--host", sv_host, "IPv4 address to bind")->capture_default_str();
  serve_cmd->add_option("--port", sv_port, "TCP port (0 picks one)")->capture_default_str();

  std::vector<std::string> reversed(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      const auto subs = app.get_subcommands();
      if (!subs.empty()) out << subs.front()->help();
      return 0;
    }
    err << "error: " << e.what() << "\n" << "run with --help for usage\n";
    return 2;
  }

  try {
    if (*phantom) return cmd_phantom(ph, out);
    if (*train_cmd) return cmd_train(tr, out);
    if (*finetune_cmd) return cmd_finetune(ft, out);
    if (*infer_cmd) return cmd_infer(inf_model, inf_data, inf_out, out);
    if (*eval_cmd) return cmd_eval(ev_data, ev_pred, ev_model, ev_out, out);
    if (*serve_cmd) return cmd_serve(sv_model, sv_host, sv_port, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace cmrlm
