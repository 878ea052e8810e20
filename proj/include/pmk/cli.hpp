#pragma once

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "pmk/augmentation.hpp"
#include "pmk/clipselect.hpp"
#include "pmk/encoding.hpp"
#include "pmk/io.hpp"
#include "pmk/parallel.hpp"
#include "pmk/synthdata.hpp"
#include "pmk/train.hpp"

namespace pmk::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode : int { kOk = 0, kUsage = 2, kSchema = 3, kIo = 4, kRuntime = 5 };

// ---- flag <-> JSON plumbing ----

// One string-valued option per key of `defaults`; set ones are applied on top of a JSON document.
struct JsonFlags {
  std::map<std::string, std::vector<CLI::Option*>> opts;  // one per subcommand sharing the key
  std::map<std::string, std::string> raw;

  void add(CLI::App* app, const json& defaults, const std::vector<std::string>& skip = {}) {
    for (const auto& [k, v] : defaults.items()) {
      if (k == "version" || std::find(skip.begin(), skip.end(), k) != skip.end()) continue;
      std::string names = "--" + k;
      if (k.find('_') != std::string::npos) {
        std::string dashed = k;
        std::replace(dashed.begin(), dashed.end(), '_', '-');
        names += ",--" + dashed;
      }
      opts[k].push_back(app->add_option(names, raw[k], "override '" + k + "' (default " + v.dump() + ")"));
    }
  }

  void apply(json& j) const {
    for (const auto& [k, list] : opts) {
      if (std::none_of(list.begin(), list.end(), [](const CLI::Option* o) { return o->count() > 0; })) continue;
      const std::string& s = raw.at(k);
      const json& ref = j.at(k);
      try {
        std::size_t used = 0;
        if (ref.is_boolean()) {
          if (s == "true" || s == "1") j[k] = true;
          else if (s == "false" || s == "0") j[k] = false;
          else throw std::invalid_argument(s);
          used = s.size();
        } else if (ref.is_number_unsigned()) {
          if (!s.empty() && s[0] == '-') throw std::invalid_argument(s);
          j[k] = std::stoull(s, &used);
        } else if (ref.is_number_integer()) {
          j[k] = std::stoll(s, &used);
        } else if (ref.is_number_float()) {
          j[k] = std::stod(s, &used);
        } else {
          j[k] = s;
          used = s.size();
        }
        if (used != s.size()) throw std::invalid_argument(s);
      } catch (const std::logic_error&) {
        throw io::IoError(io::IoErrorKind::schema, "bad value '" + s + "' for --" + k);
      }
    }
  }
};

struct ConfigFlags {
  std::string path;
  JsonFlags flags;

  void add(CLI::App* app, const std::vector<std::string>& skip = {}) {
    app->add_option("--config", path, "RunConfig JSON; flags override its values");
    flags.add(app, io::RunConfig{}.to_json(), skip);
  }
  [[nodiscard]] io::RunConfig resolve() const {
    json j = io::RunConfig{}.to_json();
    if (!path.empty()) j = io::load_config(path).to_json();
    flags.apply(j);
    return io::RunConfig::from_json(j);
  }
};

inline void dump_config(const fs::path& dir, const io::RunConfig& cfg) {
  io::write_text_atomic(dir / "config.json", cfg.to_json().dump(1) + "\n");
}

// ---- data loading ----

// Records hold either raw heatmap sequences (synth output) or encoded poses (encode output).
inline PoseRepresentation load_pose(const fs::path& path, const io::RunConfig& cfg) {
  json meta;
  auto t = io::read_tensor<float>(path, &meta);
  if (t.rank() != 4) throw io::IoError(io::IoErrorKind::bad_header, path.string() + ": expected a rank-4 tensor");
  if (t.dim(2) != cfg.height || t.dim(3) != cfg.width)
    throw io::IoError(io::IoErrorKind::schema, path.string() + ": spatial size " + std::to_string(t.dim(2)) + "x" +
                                                   std::to_string(t.dim(3)) + " does not match config " +
                                                   std::to_string(cfg.height) + "x" + std::to_string(cfg.width));
  if (meta.contains("norm")) {
    PoseRepresentation p{t.dim(0), t.dim(1), t.dim(2), t.dim(3), std::move(t.storage()),
                         parse_norm_tag(meta["norm"].get<std::string>()), meta.value("source_frames", std::size_t{0})};
    if (p.channels != cfg.channels || p.tag != parse_norm_tag(cfg.norm))
      throw io::IoError(io::IoErrorKind::schema, path.string() + ": encoded with channels=" +
                                                     std::to_string(p.channels) + " norm=" + to_string(p.tag) +
                                                     ", config has channels=" + std::to_string(cfg.channels) +
                                                     " norm=" + cfg.norm);
    return p;
  }
  HeatmapSequence s(t.dim(0), t.dim(1), t.dim(2), t.dim(3));
  s.values = std::move(t.storage());
  return encode(s, cfg.channels, parse_norm_tag(cfg.norm));
}

inline int resolve_workers(int workers) { return workers > 0 ? workers : num_threads(); }

inline train::Dataset load_split(const io::Manifest& m, const std::string& split, const io::RunConfig& cfg,
                                 int workers, std::vector<std::string>* ids = nullptr) {
  const auto recs = m.split(split);
  if (recs.empty()) throw ValueError("manifest has no records in split '" + split + "'");
  train::Dataset d;
  d.num_classes = m.num_classes();
  d.reps.resize(recs.size());
  parallel_for(
      0, recs.size(),
      [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) d.reps[i] = load_pose(m.resolve(*recs[i]), cfg);
      },
      resolve_workers(workers));
  for (const auto* r : recs) {
    d.labels.push_back(r->label);
    if (cfg.multi_label) d.multi.push_back(r->labels.empty() ? std::vector<int>{r->label} : r->labels);
    if (ids) ids->push_back(r->id);
  }
  return d;
}

inline std::vector<clips::ClipVideo> load_videos(const io::Manifest& m, const std::string& split,
                                                 const io::RunConfig& cfg, int workers) {
  const auto recs = m.split(split);
  if (recs.empty()) throw ValueError("manifest has no records in split '" + split + "'");
  std::vector<clips::ClipVideo> out(recs.size());
  parallel_for(
      0, recs.size(),
      [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
          const auto seq = io::read_sequence(m.resolve(*recs[i]));
          if (seq.height != cfg.height || seq.width != cfg.width)
            throw io::IoError(io::IoErrorKind::schema, recs[i]->id + ": spatial size does not match config");
          std::vector<std::size_t> act;
          const auto& ann = recs[i]->annotations;
          const bool has = ann.is_object() && ann.contains("action_clips");
          if (has) act = ann["action_clips"].get<std::vector<std::size_t>>();
          out[i] = clips::encode_video(seq, recs[i]->id, recs[i]->label, cfg.channels, parse_norm_tag(cfg.norm),
                                       has ? &act : nullptr);
        }
      },
      resolve_workers(workers));
  return out;
}

// ---- pipelines (callable in-process) ----

struct TrainOutput {
  train::TrainResult result;
  json metrics;
};

inline void write_run(const fs::path& out, const io::RunConfig& cfg, Network<float>& net,
                      const train::TrainResult& r, const train::Dataset& val, bool multi) {
  const auto metrics = train::metrics_json(r, cfg.hash(), multi);
  io::write_text_atomic(out / "metrics.json", metrics.dump(1) + "\n");
  io::write_text_atomic(out / "metrics.csv", train::metrics_csv(r));
  json timings = {{"epoch_seconds", train::timings_json(r)}};
  double total = 0;
  for (const auto& e : r.history) total += e.seconds;
  timings["total_seconds"] = total;
  io::write_text_atomic(out / "timings.json", timings.dump(1) + "\n");
  fs::create_directories(out / "checkpoints");
  io::save_checkpoint(out / "checkpoints", "best", net, cfg.hash(), r.best_epoch);
  if (net.kind() == "jmrn") {
    const auto pred = train::predict(net, train::pointers(val), multi);
    io::write_text_atomic(out / "gate_report.csv", train::gate_report_csv(train::gate_stats(pred)));
  }
}

inline TrainOutput run_train(const io::RunConfig& cfg, const train::Dataset& tr, const train::Dataset& va,
                             const fs::path& out, std::ostream* log = nullptr) {
  fs::create_directories(out);
  dump_config(out, cfg);
  auto net = train::build_model(cfg, tr.reps.front().joints, tr.num_classes, cfg.seed);
  train::TrainHooks hooks;
  if (log)
    hooks.on_epoch = [&](const train::EpochRecord& e, bool improved) {
      *log << "epoch " << e.epoch << " loss " << e.train_loss << " val " << e.val_metric << (improved ? " *" : "")
           << "\n";
    };
  TrainOutput o;
  o.result = train::fit(*net, tr, va, cfg, hooks);
  write_run(out, cfg, *net, o.result, va, cfg.multi_label);
  o.metrics = train::metrics_json(o.result, cfg.hash(), cfg.multi_label);
  return o;
}

// Model from a run directory; the checkpoint must belong to that run's config.
inline std::pair<io::RunConfig, std::unique_ptr<Network<float>>> load_run(const fs::path& run, std::size_t joints,
                                                                          std::size_t outputs,
                                                                          const std::string& stem = "best") {
  const auto cfg = io::load_config(run / "config.json");
  auto net = train::build_model(cfg, joints, outputs, cfg.seed);
  const auto index = io::load_checkpoint(run / "checkpoints", stem, *net);
  if (index.value("config_hash", std::string()) != cfg.hash())
    throw io::IoError(io::IoErrorKind::schema, "checkpoint config hash does not match " + (run / "config.json").string());
  return {cfg, std::move(net)};
}

struct ClipStudy {
  double acc_dense = 0, acc_selected = 0, acc_random = 0, auc = 0;
  std::size_t auc_videos = 0;
  std::string csv;
};

// Per-video selection on `videos` given classifier probabilities and ranker saliency.
inline ClipStudy clip_study(const std::vector<clips::ClipVideo>& videos, const std::vector<std::vector<double>>& probs,
                            const std::vector<std::vector<double>>& saliency, std::size_t num_classes,
                            std::size_t k_select, clips::Consensus mode, std::uint64_t seed,
                            std::size_t random_draws = 10) {
  ClipStudy s;
  std::vector<int> truth, dense, sel;
  std::vector<std::vector<int>> rnd(random_draws);
  std::ostringstream csv;
  csv.precision(8);
  csv << "video,clip,saliency,selected,action";
  for (std::size_t c = 0; c < num_classes; ++c) csv << ",p" << c;
  csv << "\n";
  double auc_sum = 0;
  for (std::size_t v = 0; v < videos.size(); ++v) {
    const auto& vid = videos[v];
    const std::size_t n = vid.clips.size();
    truth.push_back(vid.label);
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), 0);
    dense.push_back(clips::consensus_predict(probs[v], num_classes, all, mode));
    const auto pick = clips::select_and_classify(saliency[v], probs[v], num_classes, k_select, mode);
    sel.push_back(pick.prediction);
    for (std::size_t d = 0; d < random_draws; ++d) {
      Rng rng = substream(seed, {40, v, d});
      auto perm = all;
      std::shuffle(perm.begin(), perm.end(), rng);
      perm.resize(std::min(k_select, n));
      rnd[d].push_back(clips::consensus_predict(probs[v], num_classes, perm, mode));
    }
    if (!vid.action.empty() && std::count(vid.action.begin(), vid.action.end(), 1) > 0 &&
        std::count(vid.action.begin(), vid.action.end(), 0) > 0) {
      auc_sum += clips::auc(saliency[v], vid.action);
      ++s.auc_videos;
    }
    for (std::size_t i = 0; i < n; ++i) {
      const bool chosen = std::find(pick.selected.begin(), pick.selected.end(), i) != pick.selected.end();
      csv << vid.id << ',' << i << ',' << saliency[v][i] << ',' << chosen << ','
          << (vid.action.empty() ? -1 : vid.action[i]);
      for (std::size_t c = 0; c < num_classes; ++c) csv << ',' << probs[v][i * num_classes + c];
      csv << "\n";
    }
  }
  s.acc_dense = train::mean_class_accuracy(dense, truth, num_classes);
  s.acc_selected = train::mean_class_accuracy(sel, truth, num_classes);
  for (const auto& r : rnd) s.acc_random += train::mean_class_accuracy(r, truth, num_classes) / static_cast<double>(random_draws);
  s.auc = s.auc_videos ? auc_sum / static_cast<double>(s.auc_videos) : 0.0;
  s.csv = csv.str();
  return s;
}

// Clip classifier f: trained on the action-bearing clips (all clips when unannotated) of each video.
inline train::Dataset clip_dataset(const std::vector<clips::ClipVideo>& videos, std::size_t num_classes) {
  train::Dataset d;
  d.num_classes = num_classes;
  for (const auto& v : videos)
    for (std::size_t i = 0; i < v.clips.size(); ++i)
      if (v.action.empty() || v.action[i]) {
        d.reps.push_back(v.clips[i]);
        d.labels.push_back(v.label);
      }
  return d;
}

inline json oracle_json(const std::vector<clips::ClipVideo>& videos, const std::vector<std::vector<double>>& probs,
                        const clips::OracleSet& o, const std::string& split) {
  json arr = json::array();
  for (std::size_t v = 0; v < videos.size(); ++v)
    arr.push_back({{"id", videos[v].id},
                   {"split", split},
                   {"label", videos[v].label},
                   {"members", o.members[v]},
                   {"hard", o.hard[v]},
                   {"probs", probs[v]}});
  return arr;
}

struct OracleFile {
  std::size_t k = 0, num_classes = 0;
  std::map<std::string, std::vector<int>> hard;
  std::map<std::string, std::vector<double>> probs;
};

inline OracleFile read_oracle(const fs::path& dir) {
  json j;
  try {
    j = json::parse(io::read_text(dir / "oracle.json"));
  } catch (const json::parse_error& e) {
    throw io::IoError(io::IoErrorKind::schema, e.what());
  }
  OracleFile f;
  try {
    f.k = j.at("k");
    f.num_classes = j.at("num_classes");
    for (const auto& v : j.at("videos")) {
      f.hard[v.at("id")] = v.at("hard").get<std::vector<int>>();
      f.probs[v.at("id")] = v.at("probs").get<std::vector<double>>();
    }
  } catch (const json::exception& e) {
    throw io::IoError(io::IoErrorKind::schema, std::string("oracle.json: ") + e.what());
  }
  return f;
}

template <typename V>
std::vector<V> lookup(const std::map<std::string, V>& m, const std::vector<clips::ClipVideo>& videos) {
  std::vector<V> out;
  for (const auto& v : videos) {
    const auto it = m.find(v.id);
    if (it == m.end()) throw io::IoError(io::IoErrorKind::schema, "oracle has no entry for video " + v.id);
    out.push_back(it->second);
  }
  return out;
}

// ---- bench ----

inline std::vector<std::size_t> parse_shape(const std::string& s) {
  std::vector<std::size_t> dims;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, 'x')) {
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(part, &used);
    } catch (const std::logic_error&) {
      used = 0;
    }
    if (used == 0 || used != part.size() || v == 0) throw io::IoError(io::IoErrorKind::schema, "bad shape '" + s + "'");
    dims.push_back(v);
  }
  if (dims.size() != 4) throw io::IoError(io::IoErrorKind::schema, "shape must be NxJxHxW, got '" + s + "'");
  return dims;
}

inline std::vector<long long> parse_list(const std::string& s, const char* what) {
  std::vector<long long> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    std::size_t used = 0;
    long long v = 0;
    try {
      v = std::stoll(part, &used);
    } catch (const std::logic_error&) {
      used = 0;
    }
    if (used == 0 || used != part.size()) throw io::IoError(io::IoErrorKind::schema, std::string("bad ") + what + " list '" + s + "'");
    out.push_back(v);
  }
  if (out.empty()) throw io::IoError(io::IoErrorKind::schema, std::string("empty ") + what + " list");
  return out;
}

// N sequences of T x J x H x W aggregated into C channels, timed `reps` times per worker count.
inline json bench_aggregate(const std::vector<std::size_t>& shape, std::size_t frames, std::size_t channels,
                            std::size_t reps, const std::vector<long long>& workers, std::uint64_t seed) {
  if (reps < 3) throw io::IoError(io::IoErrorKind::schema, "bench needs at least 3 repetitions");
  const std::size_t n = shape[0], distinct = std::min<std::size_t>(n, 4);
  std::vector<HeatmapSequence> seqs;
  Rng rng = substream(seed, {50});
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (std::size_t i = 0; i < distinct; ++i) {
    seqs.emplace_back(frames, shape[1], shape[2], shape[3]);
    for (auto& v : seqs.back().values) v = u(rng);
  }
  const auto kernel = build_kernel(frames, channels);
  const std::size_t acc_per_seq = aggregate_accumulates(kernel, seqs.front().frame_size());
  const double accumulates = static_cast<double>(acc_per_seq) * static_cast<double>(n);
  const double elements = static_cast<double>(n) * static_cast<double>(frames * seqs.front().frame_size());
  json results = json::array();
  double base = 0;
  volatile float sink = 0;
  for (long long w : workers) {
    if (w < 1) throw io::IoError(io::IoErrorKind::schema, "worker counts must be >= 1");
    std::vector<double> secs;
    for (std::size_t r = 0; r < reps; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      for (std::size_t i = 0; i < n; ++i) {
        const auto p = aggregate(seqs[i % distinct], kernel, static_cast<int>(w));
        sink = sink + p.values[i % p.values.size()];
      }
      secs.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    auto sorted = secs;
    std::sort(sorted.begin(), sorted.end());
    const double med = sorted[sorted.size() / 2];
    if (base == 0) base = med;
    results.push_back({{"workers", w},
                       {"seconds", secs},
                       {"median_seconds", med},
                       {"elements_per_s", elements / med},
                       {"accumulates_per_s", accumulates / med},
                       {"speedup_vs_first", base / med}});
  }
  return {{"op", "aggregate"},
          {"shape", shape},
          {"frames", frames},
          {"channels", channels},
          {"reps", reps},
          {"elements_per_pass", elements},
          {"accumulates_per_pass", accumulates},
          {"hardware_threads", std::thread::hardware_concurrency()},
          {"results", results}};
}

// ---- entry point ----

inline std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

inline int fail(std::ostream& err, const std::string& kind, const std::string& msg, int code) {
  err << "error: kind=" << kind << " msg=" << one_line(msg) << "\n";
  return code;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"pmk: pose motion pipeline"};
  app.require_subcommand(1);
  bool deterministic = false;
  int workers = 0;
  app.add_flag("--deterministic", deterministic, "single-threaded everywhere");
  app.add_option("--workers", workers, "worker threads (default: PMK_THREADS, then all cores)");

  auto sub = [&](const char* name, const char* help) {
    auto* s = app.add_subcommand(name, help);
    s->fallthrough();
    return s;
  };

  // synth / synth-untrimmed
  std::string spec_path, out_dir;
  JsonFlags spec_flags;
  double window_fraction = 0.5;
  auto* c_synth = sub("synth", "generate the trimmed synthetic corpus");
  auto* c_untr = sub("synth-untrimmed", "generate the untrimmed synthetic corpus");
  for (auto* s : {c_synth, c_untr}) {
    s->add_option("--spec", spec_path, "synthetic corpus spec JSON");
    s->add_option("--out", out_dir)->required();
    spec_flags.add(s, synth::SynthSpec{}.to_json());
  }
  c_untr->add_option("--window_fraction,--window-fraction", window_fraction, "action share of each video");

  // commands driven by RunConfig
  ConfigFlags cf;
  std::string in_path, run_dir, split = "val", classifier_dir, oracle_dir, ranker_dir, data_path;
  auto* c_encode = sub("encode", "encode a sequence manifest into pose representations");
  auto* c_aug = sub("augment", "apply PAA (+flip) to one pose file");
  auto* c_train = sub("train", "train a classifier");
  auto* c_eval = sub("eval", "evaluate a trained run");
  auto* c_gate = sub("gate-report", "per-joint gate statistics of a JMRN run");
  auto* c_oracle = sub("clips-oracle", "clip classifier + oracle sets for untrimmed videos");
  auto* c_ctrain = sub("clips-train", "train the clip saliency ranker");
  auto* c_select = sub("clips-select", "select salient clips and classify");
  auto* c_sweep = sub("sweep", "train over a beta x gamma grid");
  for (auto* s : {c_encode, c_aug, c_train, c_oracle, c_ctrain}) cf.add(s);
  cf.add(c_sweep, {"beta", "gamma"});
  c_encode->add_option("--in", in_path)->required();
  c_encode->add_option("--out", out_dir)->required();
  c_aug->add_option("--in", in_path)->required();
  c_aug->add_option("--out", out_dir)->required();
  for (auto* s : {c_train, c_sweep, c_oracle, c_ctrain}) {
    s->add_option("--data", data_path, "manifest.json")->required();
    s->add_option("--out", out_dir)->required();
  }
  c_oracle->add_option("--classifier", classifier_dir, "reuse a trained clip classifier run");
  c_ctrain->add_option("--oracle", oracle_dir)->required();
  for (auto* s : {c_eval, c_gate}) {
    s->add_option("--run", run_dir)->required();
    s->add_option("--data", data_path)->required();
    s->add_option("--split", split);
    s->add_option("--out", out_dir, "output file");
  }
  std::size_t k_select = 0;
  std::string consensus;
  std::uint64_t select_seed = 0;
  c_select->add_option("--data", data_path)->required();
  c_select->add_option("--oracle", oracle_dir)->required();
  c_select->add_option("--ranker", ranker_dir)->required();
  c_select->add_option("--split", split);
  c_select->add_option("--k_select,--k-select,--k", k_select, "clips kept per video");
  c_select->add_option("--consensus", consensus)->check(CLI::IsMember({"max", "avg"}));
  c_select->add_option("--seed", select_seed, "seed of the random-selection baseline");
  c_select->add_option("--out", out_dir, "per-video CSV");

  std::string beta_list = "0,2,4", gamma_list = "0,2,4";
  c_sweep->add_option("--beta", beta_list, "comma-separated beta values");
  c_sweep->add_option("--gamma", gamma_list, "comma-separated gamma values");

  std::string op = "aggregate", shape_s = "64x19x64x64", worker_list = "1";
  std::size_t frames = 64, channels = 3, reps = 3;
  std::uint64_t bench_seed = 0;
  auto* c_bench = sub("bench", "time a kernel");
  c_bench->add_option("--op", op)->check(CLI::IsMember({"aggregate"}));
  c_bench->add_option("--shape", shape_s, "NxJxHxW");
  c_bench->add_option("--frames", frames);
  c_bench->add_option("--channels", channels);
  c_bench->add_option("--reps", reps);
  c_bench->add_option("--worker-list,--worker_list", worker_list, "comma-separated worker counts");
  c_bench->add_option("--seed", bench_seed);
  c_bench->add_option("--out", out_dir, "report JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    return fail(err, "usage", e.what(), kUsage);
  }

  if (deterministic) workers = 1;
  set_num_threads(workers > 0 ? workers : 0);

  try {
    if (c_synth->parsed() || c_untr->parsed()) {
      json j = synth::SynthSpec{}.to_json();
      if (!spec_path.empty()) {
        try {
          j = json::parse(io::read_text(spec_path));
        } catch (const json::parse_error& e) {
          throw io::IoError(io::IoErrorKind::schema, e.what());
        }
        json full = synth::SynthSpec{}.to_json();
        for (const auto& [k, v] : j.items()) full[k] = v;
        j = full;
      }
      spec_flags.apply(j);
      synth::SynthSpec spec;
      try {
        spec = synth::SynthSpec::from_json(j);
      } catch (const ValueError& e) {
        throw io::IoError(io::IoErrorKind::schema, e.what());
      }
      const auto w = static_cast<std::size_t>(resolve_workers(workers));
      const auto recs = c_synth->parsed() ? synth::generate(spec, out_dir, w)
                                          : synth::generate_untrimmed(spec, window_fraction, out_dir, w);
      out << json{{"records", recs.size()}, {"manifest", (fs::path(out_dir) / "manifest.json").string()}}.dump() << "\n";
      return kOk;
    }

    if (c_encode->parsed()) {
      const auto cfg = cf.resolve();
      const auto m = io::load_manifest(in_path);
      fs::create_directories(out_dir);
      std::vector<io::ManifestRecord> recs = m.records;
      parallel_for(
          0, recs.size(),
          [&](std::size_t lo, std::size_t hi) {
            for (std::size_t i = lo; i < hi; ++i) {
              const auto p = load_pose(m.resolve(m.records[i]), cfg);
              recs[i].path = m.records[i].id + ".pose.pmkt";
              io::write_pose(fs::path(out_dir) / recs[i].path, p);
            }
          },
          resolve_workers(workers));
      io::save_manifest(fs::path(out_dir) / "manifest.json", recs);
      dump_config(out_dir, cfg);
      out << json{{"records", recs.size()}}.dump() << "\n";
      return kOk;
    }

    if (c_aug->parsed()) {
      const auto cfg = cf.resolve();
      const auto p = io::read_pose(in_path);
      Rng rng = substream(cfg.seed, {30});
      io::write_pose(out_dir, augment(p, JointGroups::coco19(), {cfg.beta, cfg.gamma, cfg.flip_prob}, rng));
      return kOk;
    }

    if (c_train->parsed()) {
      const auto cfg = cf.resolve();
      const auto m = io::load_manifest(data_path);
      const auto tr = load_split(m, "train", cfg, workers), va = load_split(m, "val", cfg, workers);
      const auto o = run_train(cfg, tr, va, out_dir, &err);
      out << o.metrics["summary"].dump() << "\n";
      return kOk;
    }

    if (c_eval->parsed() || c_gate->parsed()) {
      const auto cfg = io::load_config(fs::path(run_dir) / "config.json");
      const auto m = io::load_manifest(data_path);
      const auto d = load_split(m, split, cfg, workers);
      auto [rc, net] = load_run(run_dir, d.reps.front().joints, d.num_classes);
      const auto pred = train::predict(*net, train::pointers(d), cfg.multi_label);
      if (c_eval->parsed()) {
        const json rep = {{"split", split},
                          {"metric", cfg.multi_label ? "mAP" : "mean_class_accuracy"},
                          {"value", train::evaluate_metric(pred, d)},
                          {"samples", d.size()},
                          {"config_hash", cfg.hash()}};
        io::write_text_atomic(out_dir.empty() ? fs::path(run_dir) / ("eval_" + split + ".json") : fs::path(out_dir),
                              rep.dump(1) + "\n");
        out << rep.dump() << "\n";
      } else {
        if (net->kind() != "jmrn") throw ValueError("gate-report needs a jmrn run, got " + net->kind());
        const auto csv = train::gate_report_csv(train::gate_stats(pred));
        io::write_text_atomic(out_dir.empty() ? fs::path(run_dir) / "gate_report.csv" : fs::path(out_dir), csv);
        out << csv;
      }
      return kOk;
    }

    if (c_oracle->parsed()) {
      const auto cfg = cf.resolve();
      const auto m = io::load_manifest(data_path);
      const std::size_t k = m.num_classes();
      const auto tr = load_videos(m, "train", cfg, workers), va = load_videos(m, "val", cfg, workers);
      const fs::path od(out_dir);
      fs::create_directories(od);
      std::unique_ptr<Network<float>> f;
      if (classifier_dir.empty()) {
        run_train(cfg, clip_dataset(tr, k), clip_dataset(va, k), od / "classifier", &err);
        classifier_dir = (od / "classifier").string();
      }
      f = load_run(classifier_dir, tr.front().clips.front().joints, k).second;
      json videos = json::array();
      for (const auto* set : {&tr, &va}) {
        std::vector<std::vector<double>> probs;
        std::vector<int> labels;
        for (const auto& v : *set) {
          probs.push_back(clips::clip_probabilities(*f, v));
          labels.push_back(v.label);
        }
        const auto o = clips::build_oracle(probs, labels, k, cfg.oracle_k);
        for (auto& e : oracle_json(*set, probs, o, set == &tr ? "train" : "val")) videos.push_back(e);
      }
      io::write_text_atomic(od / "oracle.json",
                            json{{"k", cfg.oracle_k}, {"num_classes", k}, {"classifier", classifier_dir}, {"videos", videos}}.dump() + "\n");
      dump_config(od, cfg);
      out << json{{"videos", videos.size()}, {"oracle", (od / "oracle.json").string()}}.dump() << "\n";
      return kOk;
    }

    if (c_ctrain->parsed()) {
      const auto cfg = cf.resolve();
      const auto m = io::load_manifest(data_path);
      const auto orc = read_oracle(oracle_dir);
      const auto tr = load_videos(m, "train", cfg, workers), va = load_videos(m, "val", cfg, workers);
      const auto hard = lookup(orc.hard, tr), val_hard = lookup(orc.hard, va);
      auto ranker = clips::build_ranker(cfg, tr.front().clips.front().joints, cfg.seed);
      const auto r = clips::train_ranker(*ranker, tr, hard, cfg, 6, &va, &val_hard);
      const fs::path od(out_dir);
      fs::create_directories(od / "checkpoints");
      dump_config(od, cfg);
      io::save_checkpoint(od / "checkpoints", "best", *ranker, cfg.hash(), r.history.size());
      std::ostringstream csv;
      csv.precision(10);
      csv << "epoch,loss,pair_accuracy,val_pair_accuracy,lr\n";
      for (const auto& e : r.history)
        csv << e.epoch << ',' << e.loss << ',' << e.pair_accuracy << ',' << e.val_pair_accuracy << ',' << e.lr << "\n";
      io::write_text_atomic(od / "ranker_metrics.csv", csv.str());
      const json summary = {{"best_val_pair_accuracy", r.best}, {"skipped_videos", r.skipped_videos}, {"config_hash", cfg.hash()}};
      io::write_text_atomic(od / "ranker_metrics.json", summary.dump(1) + "\n");
      out << summary.dump() << "\n";
      return kOk;
    }

    if (c_select->parsed()) {
      auto cfg = io::load_config(fs::path(ranker_dir) / "config.json");
      if (k_select) cfg.k_select = k_select;
      if (!consensus.empty()) cfg.consensus = consensus;
      cfg.validate();
      const auto m = io::load_manifest(data_path);
      const auto orc = read_oracle(oracle_dir);
      const auto videos = load_videos(m, split, cfg, workers);
      auto ranker = load_run(ranker_dir, videos.front().clips.front().joints, 1).second;
      std::vector<std::vector<double>> sal;
      for (const auto& v : videos) sal.push_back(clips::score_clips(*ranker, v.clips));
      const auto st = clip_study(videos, lookup(orc.probs, videos), sal, orc.num_classes, cfg.k_select,
                                 clips::parse_consensus(cfg.consensus), select_seed);
      const fs::path csv_path = out_dir.empty() ? fs::path(ranker_dir) / ("select_" + split + ".csv") : fs::path(out_dir);
      io::write_text_atomic(csv_path, st.csv);
      const json summary = {{"split", split},
                            {"k_select", cfg.k_select},
                            {"consensus", cfg.consensus},
                            {"accuracy_selected", st.acc_selected},
                            {"accuracy_dense", st.acc_dense},
                            {"accuracy_random", st.acc_random},
                            {"auc_action_vs_idle", st.auc},
                            {"auc_videos", st.auc_videos}};
      fs::path js = csv_path;
      js.replace_extension(".json");
      io::write_text_atomic(js, summary.dump(1) + "\n");
      out << summary.dump() << "\n";
      return kOk;
    }

    if (c_sweep->parsed()) {
      const auto base = cf.resolve();
      const auto betas = parse_list(beta_list, "beta"), gammas = parse_list(gamma_list, "gamma");
      const auto m = io::load_manifest(data_path);
      const auto tr = load_split(m, "train", base, workers), va = load_split(m, "val", base, workers);
      const fs::path od(out_dir);
      fs::create_directories(od);
      dump_config(od, base);
      std::ostringstream grid, cells;
      grid.precision(6);
      cells.precision(10);
      grid << "beta\\gamma";
      for (auto g : gammas) grid << ',' << g;
      grid << "\n";
      cells << "beta,gamma,best_metric,best_epoch,run\n";
      for (auto b : betas) {
        grid << b;
        for (auto g : gammas) {
          auto cfg = base;
          cfg.beta = static_cast<int>(b);
          cfg.gamma = static_cast<int>(g);
          cfg.validate();
          const std::string name = "b" + std::to_string(b) + "_g" + std::to_string(g);
          const auto o = run_train(cfg, tr, va, od / name);
          grid << ',' << o.result.best_metric;
          cells << b << ',' << g << ',' << o.result.best_metric << ',' << o.result.best_epoch << ',' << name << "\n";
        }
        grid << "\n";
      }
      io::write_text_atomic(od / "sweep.csv", grid.str());
      io::write_text_atomic(od / "sweep_cells.csv", cells.str());
      out << grid.str();
      return kOk;
    }

    if (c_bench->parsed()) {
      const auto rep = bench_aggregate(parse_shape(shape_s), frames, channels, reps,
                                       deterministic ? std::vector<long long>{1} : parse_list(worker_list, "worker"),
                                       bench_seed);
      if (!out_dir.empty()) io::write_text_atomic(out_dir, rep.dump(1) + "\n");
      out << rep.dump() << "\n";
      return kOk;
    }
  } catch (const io::IoError& e) {
    switch (e.kind()) {
      case io::IoErrorKind::schema:
      case io::IoErrorKind::bad_header: return fail(err, io::to_string(e.kind()), e.what(), kSchema);
      default: return fail(err, io::to_string(e.kind()), e.what(), kIo);
    }
  } catch (const NumericError& e) {
    return fail(err, "numeric", e.what(), kRuntime);
  } catch (const ShapeError& e) {
    return fail(err, "shape", e.what(), kRuntime);
  } catch (const ValueError& e) {
    return fail(err, "value", e.what(), kRuntime);
  } catch (const fs::filesystem_error& e) {
    return fail(err, "io", e.what(), kIo);
  } catch (const std::exception& e) {
    return fail(err, "internal", e.what(), kRuntime);
  }
  return fail(err, "usage", "no subcommand", kUsage);
}

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::vector<const char*> argv{"pmk"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace pmk::cli
