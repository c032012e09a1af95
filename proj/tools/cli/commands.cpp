#include "cli/commands.hpp"

#include <fmt/format.h>
#include <fmt/ostream.h>

#include <CLI11.hpp>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <regex>
#include <sstream>

#include "cli/config.hpp"
#include "cli/image_io.hpp"
#include "lavi/error.hpp"
#include "lavi/eval.hpp"

namespace lavi::cli {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;

  std::optional<int> count;  // dataset

  bool resume = false;  // train
  int stop_after = 0;

  std::string checkpoint;  // sample
  std::string prompts;
  std::optional<double> cfg_scale;
  std::optional<double> eta;
  std::optional<int> steps;

  std::string samples;  // eval
  std::string report;
  std::string sheet;
};

RunConfig resolve(const Options& o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : load_config(o.config);
  apply_env_overrides(cfg, process_environment);
  if (!o.out.empty()) cfg.output.dir = o.out;
  return cfg;
}

// Creates `dir`, refusing to reuse a non-empty directory without --force.
void prepare_out_dir(const std::string& dir, bool force) {
  std::error_code ec;
  if (fs::exists(dir, ec)) {
    if (!fs::is_directory(dir, ec)) throw IoError("output path '" + dir + "' is not a directory");
    if (!fs::is_empty(dir, ec) && !force) {
      throw ConfigError("output directory '" + dir + "' is not empty (pass --force to reuse it)");
    }
  }
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory '" + dir + "': " + ec.message());
  const fs::path probe = fs::path(dir) / ".lavi_write_probe";
  {
    std::ofstream f(probe);
    if (!f) throw IoError("output directory '" + dir + "' is not writable");
  }
  fs::remove(probe, ec);
}

std::string indexed(std::uint64_t i, const char* ext) { return fmt::format("{:06d}.{}", i, ext); }

std::string opt_acc(const std::optional<double>& v) { return v ? fmt::format("{}", *v) : std::string("absent"); }

int cmd_dataset(const Options& o, std::ostream& out, std::ostream&) {
  RunConfig cfg = resolve(o);
  if (o.seed) cfg.dataset.seed = *o.seed;
  if (o.count) cfg.dataset.count = *o.count;
  cfg.validate();
  const std::string dir = cfg.output.dir;
  prepare_out_dir(dir, o.force);
  write_text_file(dir + "/config.ini", to_ini(cfg));

  Json samples = Json::array();
  for (int i = 0; i < cfg.dataset.count; ++i) {
    const Batch b = make_batch(cfg.dataset.seed, i, 1, cfg.dataset.resolution);
    const auto res = cfg.dataset.resolution;
    write_png(dir + "/" + indexed(i, "png"), b.images.reshaped({3, res, res}));
    Json record;
    record["index"] = i;
    record["caption"] = b.captions[0];
    record["spec"] = Json::parse(to_json(b.specs[0]));
    write_text_file(dir + "/" + indexed(i, "json"), record.dump() + "\n");
    samples.push_back(Json{{"index", i}, {"file", indexed(i, "png")}, {"prompt", b.captions[0]}});
  }
  Json manifest;
  manifest["kind"] = "dataset";
  manifest["seed"] = cfg.dataset.seed;
  manifest["count"] = cfg.dataset.count;
  manifest["resolution"] = cfg.dataset.resolution;
  manifest["samples"] = samples;
  write_text_file(dir + "/manifest.json", manifest.dump(2) + "\n");
  fmt::print(out, "dataset count={} seed={} dir={}\n", cfg.dataset.count, cfg.dataset.seed, dir);
  return kExitOk;
}

std::optional<std::string> latest_checkpoint(const std::string& dir) {
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) return std::nullopt;
  static const std::regex name(R"(step_(\d{6,})\.ckpt)");
  std::optional<std::string> best;
  long long best_step = -1;
  for (const auto& e : fs::directory_iterator(dir)) {
    std::smatch m;
    const std::string f = e.path().filename().string();
    if (!std::regex_match(f, m, name)) continue;
    const long long step = std::stoll(m[1]);
    if (step > best_step) {
      best_step = step;
      best = e.path().string();
    }
  }
  return best;
}

// Keeps the loss-log lines of steps <= last_step.
void truncate_loss_log(const std::string& path, std::int64_t last_step) {
  std::ifstream in(path);
  std::string kept, line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::int64_t step = 0;
    if (ls >> step && step <= last_step) kept += line + "\n";
  }
  in.close();
  write_text_file(path, kept);
}

void write_snapshot(const BridgedModel& model, const RunConfig& cfg, const NoiseSchedule& sched,
                    const std::vector<std::string>& prompts, const std::string& path) {
  if (prompts.empty()) return;
  const SampleConfig sc = sample_config(cfg);
  std::vector<Tensor> images;
  for (std::size_t i = 0; i < prompts.size(); ++i) images.push_back(sample_prompt(model, prompts[i], i, sched, sc));
  write_png(path, contact_sheet(images, 4));
}

int cmd_train(const Options& o, std::ostream& out, std::ostream& err) {
  RunConfig cfg = resolve(o);
  if (o.seed) cfg.train.seed = *o.seed;
  cfg.validate();
  const std::string dir = cfg.output.dir;
  const std::string ckpt_dir = dir + "/checkpoints";
  const std::string snap_dir = dir + "/snapshots";
  const std::string log_path = dir + "/loss.log";

  std::optional<CheckpointRecord> resumed;
  if (o.resume) {
    const auto latest = latest_checkpoint(ckpt_dir);
    if (!latest) throw ConfigError("nothing to resume: no checkpoint in '" + ckpt_dir + "'");
    resumed = load_checkpoint(*latest);
    RunConfig saved = parse_config(resumed->config_text);
    saved.output.dir = cfg.output.dir;
    if ((!o.config.empty() || o.seed) && to_ini(saved) != to_ini(cfg)) {
      throw ConfigError("config differs from the one recorded in '" + *latest + "'");
    }
    cfg = saved;
    fmt::print(err, "resuming from {} (step {})\n", *latest, resumed->step);
  } else {
    prepare_out_dir(dir, o.force);
    std::error_code ec;
    fs::remove_all(ckpt_dir, ec);
    fs::remove_all(snap_dir, ec);
    fs::remove(log_path, ec);
  }
  fs::create_directories(ckpt_dir);
  fs::create_directories(snap_dir);
  const std::string config_text = to_ini(cfg, false);
  write_text_file(dir + "/config.ini", to_ini(cfg));

  auto model = build_model(cfg);
  const NoiseSchedule sched = build_schedule(cfg);
  Trainer trainer(*model, sched, cfg.train);
  if (resumed) {
    trainer.restore(*resumed);
    truncate_loss_log(log_path, resumed->step);
  }
  const auto snapshot_prompts =
      make_batch(cfg.train.seed + 1, 0, cfg.snapshot_samples, cfg.train.resolution).captions;

  std::ofstream log(log_path, std::ios::app);
  if (!log) throw IoError("cannot write '" + log_path + "'");
  const auto t0 = std::chrono::steady_clock::now();
  double last_loss = 0;
  const int report_every = std::max(1, cfg.train.steps / 20);
  while (trainer.current_step() < cfg.train.steps) {
    if (o.stop_after > 0 && trainer.current_step() >= o.stop_after) break;
    StepResult r;
    try {
      r = trainer.step();
    } catch (const NumericalError& e) {
      fmt::print(err, "error: step {}: {}\n", trainer.current_step() + 1, e.what());
      return kExitNumerical;
    }
    last_loss = r.loss;
    const std::int64_t k = trainer.current_step();
    log << fmt::format("{} {}\n", k, r.loss) << std::flush;
    if (k % cfg.train.snapshot_every == 0) {
      save_checkpoint(trainer.checkpoint(config_text), ckpt_dir + "/step_" + indexed(k, "ckpt"));
      write_snapshot(*model, cfg, sched, snapshot_prompts, snap_dir + "/step_" + indexed(k, "png"));
    }
    if (k % report_every == 0 || k == cfg.train.steps) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      fmt::print(err, "step {}/{} loss {:.6f} [wall {:.1f}s]\n", k, cfg.train.steps, r.loss, secs);
    }
  }
  fmt::print(out, "train steps={} final_loss={} uncond_fraction={} dir={}\n", trainer.current_step(), last_loss,
             trainer.total_items() ? static_cast<double>(trainer.uncond_items()) / trainer.total_items() : 0.0, dir);
  return kExitOk;
}

std::vector<std::string> read_prompts(const std::string& path) {
  const std::string text = read_text_file(path);
  std::vector<std::string> prompts;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    prompts.push_back(line);
  }
  return prompts;
}

int cmd_sample(const Options& o, std::ostream& out, std::ostream& err) {
  const CheckpointRecord rec = load_checkpoint(o.checkpoint);
  RunConfig cfg = parse_config(rec.config_text);
  apply_env_overrides(cfg, process_environment);
  cfg.output.dir = o.out.empty() ? cfg.output.dir + "/samples" : o.out;
  if (o.seed) cfg.sample.seed = *o.seed;
  if (o.cfg_scale) cfg.sample.cfg_scale = *o.cfg_scale;
  if (o.eta) cfg.sample.eta = *o.eta;
  if (o.steps) cfg.sample.steps = *o.steps;
  cfg.validate();
  const auto prompts = read_prompts(o.prompts);
  const std::string dir = cfg.output.dir;
  prepare_out_dir(dir, o.force);
  write_text_file(dir + "/config.ini", to_ini(cfg));

  auto model = build_model(cfg);
  load_trainable(*model, rec);
  const NoiseSchedule sched = build_schedule(cfg);
  const SampleConfig sc = sample_config(cfg);
  const std::int64_t max_len = model->language().config().max_len;

  Json samples = Json::array(), skipped = Json::array();
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const std::int64_t need = token_count(prompts[i]);
    if (need > max_len) {
      fmt::print(err, "warning: prompt {} needs {} tokens (max {}), skipped: {}\n", i, need, max_len, prompts[i]);
      skipped.push_back(Json{{"index", i}, {"prompt", prompts[i]}, {"reason", "exceeds max_len"}});
      continue;
    }
    write_png(dir + "/" + indexed(i, "png"), sample_prompt(*model, prompts[i], i, sched, sc));
    samples.push_back(Json{{"index", i}, {"file", indexed(i, "png")}, {"prompt", prompts[i]}});
  }
  Json manifest;
  manifest["kind"] = "samples";
  manifest["checkpoint_step"] = rec.step;
  manifest["seed"] = cfg.sample.seed;
  manifest["steps"] = cfg.sample.steps;
  manifest["cfg_scale"] = cfg.sample.cfg_scale;
  manifest["eta"] = cfg.sample.eta;
  manifest["resolution"] = cfg.train.resolution;
  manifest["count"] = samples.size();
  manifest["samples"] = samples;
  manifest["skipped"] = skipped;
  write_text_file(dir + "/manifest.json", manifest.dump(2) + "\n");
  fmt::print(out, "sample count={} skipped={} dir={}\n", samples.size(), skipped.size(), dir);
  return kExitOk;
}

std::string record_line(std::size_t i, const std::string& file, const SampleRecord& r) {
  std::string status = "ok";
  if (!r.parsed) {
    status = "excluded";
  } else if (r.rejected) {
    status = "rejected(" + r.reject_reason + ")";
  }
  return fmt::format("record.{:06d}=file={} color={}/{} shape={}/{} spatial={}/{} status={} prompt=\"{}\"\n", i, file,
                     r.color_matched, r.color_evaluated, r.shape_matched, r.shape_evaluated, r.spatial_matched,
                     r.spatial_evaluated, status, r.prompt);
}

int cmd_eval(const Options& o, std::ostream& out, std::ostream&) {
  RunConfig cfg = resolve(o);
  cfg.validate();
  const std::string manifest_path = o.samples + "/manifest.json";
  if (!fs::exists(manifest_path)) throw IoError("missing manifest '" + manifest_path + "'");
  Json manifest;
  try {
    manifest = Json::parse(read_text_file(manifest_path));
  } catch (const Json::exception& e) {
    throw IoError("malformed manifest '" + manifest_path + "': " + e.what());
  }
  if (!manifest.contains("samples") || !manifest["samples"].is_array()) {
    throw IoError("manifest '" + manifest_path + "' has no samples array");
  }

  std::vector<PromptImage> items;
  std::vector<std::string> files;
  for (const auto& s : manifest["samples"]) {
    if (!s.contains("file") || !s.contains("prompt")) throw IoError("manifest entry without file/prompt");
    files.push_back(s["file"].get<std::string>());
    items.push_back({s["prompt"].get<std::string>(), read_png(o.samples + "/" + files.back())});
  }
  const AlignmentReport rep = alignment_score(items);

  std::optional<double> frechet;
  if (items.size() >= 2) {
    const int res = static_cast<int>(items[0].image.dim(1));
    std::vector<std::vector<double>> gen, ref;
    for (const auto& it : items) gen.push_back(image_features(it.image));
    const Batch refs = make_batch(cfg.eval.reference_seed, 0, cfg.eval.reference_count, res);
    const std::int64_t per = 3LL * res * res;
    for (int i = 0; i < cfg.eval.reference_count; ++i) {
      Tensor img({3, res, res}, std::vector<Scalar>(refs.images.ptr() + i * per, refs.images.ptr() + (i + 1) * per));
      ref.push_back(image_features(img));
    }
    frechet = frechet_distance(gen, ref, FrechetConfig{cfg.eval.frechet_eps});
  }

  std::string text;
  text += fmt::format("n_samples={}\n", rep.n_samples);
  text += fmt::format("n_excluded={}\n", rep.n_excluded);
  text += fmt::format("n_rejected={}\n", rep.n_rejected);
  text += fmt::format("reject_rate={}\n",
                      rep.n_samples ? static_cast<double>(rep.n_rejected) / static_cast<double>(rep.n_samples) : 0.0);
  text += fmt::format("color_accuracy={}\n", opt_acc(rep.color_accuracy()));
  text += fmt::format("color_matched={}\ncolor_evaluated={}\n", rep.color_matched, rep.color_evaluated);
  text += fmt::format("shape_accuracy={}\n", opt_acc(rep.shape_accuracy()));
  text += fmt::format("shape_matched={}\nshape_evaluated={}\n", rep.shape_matched, rep.shape_evaluated);
  text += fmt::format("spatial_accuracy={}\n", opt_acc(rep.spatial_accuracy()));
  text += fmt::format("spatial_matched={}\nspatial_evaluated={}\n", rep.spatial_matched, rep.spatial_evaluated);
  text += fmt::format("mean_accuracy={}\n", opt_acc(rep.mean_accuracy()));
  text += fmt::format("frechet_distance={}\n", opt_acc(frechet));
  text += fmt::format("frechet_reference_count={}\nfrechet_reference_seed={}\n", cfg.eval.reference_count,
                      cfg.eval.reference_seed);
  for (std::size_t i = 0; i < rep.records.size(); ++i) text += record_line(i, files[i], rep.records[i]);

  const std::string report_path = o.report.empty() ? o.samples + "/report.txt" : o.report;
  write_text_file(report_path, text);
  if (!o.sheet.empty() && !items.empty()) {
    std::vector<Tensor> images;
    for (const auto& it : items) images.push_back(it.image);
    write_png(o.sheet, contact_sheet(images, 8));
  }
  fmt::print(out, "eval n_samples={} color={} shape={} spatial={} frechet={} report={}\n", rep.n_samples,
             opt_acc(rep.color_accuracy()), opt_acc(rep.shape_accuracy()), opt_acc(rep.spatial_accuracy()),
             opt_acc(frechet), report_path);
  return kExitOk;
}

int cmd_params(const Options& o, std::ostream& out, std::ostream&) {
  RunConfig cfg = resolve(o);
  cfg.validate();
  auto model = build_model(cfg);
  out << format_parameter_report(model->count_parameters(), model->sites());
  return kExitOk;
}

}  // namespace

Tensor sample_prompt(const BridgedModel& model, const std::string& prompt, std::uint64_t index,
                     const NoiseSchedule& sched, const SampleConfig& cfg) {
  NoGradGuard no_grad;
  SampleConfig sc = cfg;
  sc.seed = cfg.seed ^ index;
  const TextEncoding cond = model.encode(std::vector<std::string>{prompt});
  Tensor img = sample(model, cond, model.null_encoding(), sched, sc);
  return std::move(img).reshaped({img.dim(1), img.dim(2), img.dim(3)});
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Bridges a frozen language model and a frozen diffusion denoiser with LoRA and an adapter."};
  app.name(args.empty() ? "lavibridge" : args[0]);
  app.require_subcommand(1);
  app.add_option("--config", o.config, "INI run configuration");
  app.add_option("--seed", o.seed, "Seed for the command (dataset, train or sample)");
  app.add_option("--out", o.out, "Output directory");
  app.add_flag("--force", o.force, "Reuse a non-empty output directory");

  auto* dataset = app.add_subcommand("dataset", "Render captioned synthetic scenes");
  dataset->add_option("-n,--count", o.count, "Number of samples");
  auto* train = app.add_subcommand("train", "Train LoRA deltas and the adapter");
  train->add_flag("--resume", o.resume, "Continue from the latest checkpoint in the output directory");
  train->add_option("--stop-after", o.stop_after, "Stop once this many steps are done")->check(CLI::NonNegativeNumber);
  auto* sample_cmd = app.add_subcommand("sample", "Generate one image per prompt");
  sample_cmd->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
  sample_cmd->add_option("--prompts", o.prompts, "Prompt file, one per line")->required();
  sample_cmd->add_option("--cfg-scale", o.cfg_scale, "Guidance scale");
  sample_cmd->add_option("--steps", o.steps, "DDIM steps");
  sample_cmd->add_option("--eta", o.eta, "DDIM eta");
  auto* eval = app.add_subcommand("eval", "Score a sample directory");
  eval->add_option("--samples", o.samples, "Directory with manifest.json")->required();
  eval->add_option("--report", o.report, "Report path (default <samples>/report.txt)");
  eval->add_option("--sheet", o.sheet, "Optional contact-sheet PNG");
  auto* params = app.add_subcommand("params", "Print the parameter report");
  for (auto* sub : {dataset, train, sample_cmd, eval, params}) sub->fallthrough();

  std::vector<std::string> storage(args.begin(), args.end());
  if (storage.empty()) storage.emplace_back("lavibridge");
  std::vector<char*> argv;
  for (auto& s : storage) argv.push_back(s.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    fmt::print(err, "error: {}\n", e.what());
    return kExitUsage;
  }

  try {
    if (*dataset) return cmd_dataset(o, out, err);
    if (*train) return cmd_train(o, out, err);
    if (*sample_cmd) return cmd_sample(o, out, err);
    if (*eval) return cmd_eval(o, out, err);
    return cmd_params(o, out, err);
  } catch (const NumericalError& e) {
    fmt::print(err, "error: {}\n", e.what());
    return kExitNumerical;
  } catch (const ConfigError& e) {
    fmt::print(err, "error: {}\n", e.what());
    return kExitUsage;
  } catch (const FormatError& e) {
    fmt::print(err, "error: {}\n", e.what());
    return kExitUsage;
  } catch (const IoError& e) {
    fmt::print(err, "error: {}\n", e.what());
    return kExitUsage;
  } catch (const fs::filesystem_error& e) {
    fmt::print(err, "error: {}\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    fmt::print(err, "internal error: {}\n", e.what());
    return kExitInternal;
  }
}

int run(int argc, char** argv) { return run(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr); }

}  // namespace lavi::cli
