#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "tpsep/audio/manifest.hpp"
#include "tpsep/net/inference.hpp"
#include "tpsep/net/params.hpp"
#include "tpsep/net/sepnet.hpp"
#include "tpsep/objective.hpp"
#include "tpsep/train/adam.hpp"
#include "tpsep/train/checkpoint.hpp"

namespace tpsep::train {

class TrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Mode { kSingle, kMulti };

inline Mode parse_mode(const std::string& s) {
  if (s == "single") return Mode::kSingle;
  if (s == "multi") return Mode::kMulti;
  throw TrainError("train: unknown mode '" + s + "' (expected single or multi)");
}

struct TrainConfig {
  int epochs = 150;
  int batch_size = 2;
  double learning_rate = 1e-3;
  double grad_clip_norm = 5.0;
  std::uint64_t seed = 0;
  Mode mode = Mode::kMulti;
  std::filesystem::path dataset_dir;
  net::ModelConfig model;
  double validation_fraction = 0.2;
};

/// Model actually trained. Single mode collapses to one sub-network whose
/// repeat count matches the parameter budget of the cascade it replaces:
/// 3P for reverberant data, 2P when the data carry no reverberation.
inline net::ModelConfig effective_model(const net::ModelConfig& m, Mode mode, bool reverberant) {
  if (mode == Mode::kMulti) return m;
  net::ModelConfig s = m;
  s.stages = 1;
  s.repeats_p = (reverberant ? 3 : 2) * m.repeats_p;
  return s;
}

struct EpochRecord {
  int epoch = 0;
  double alpha = 0.0;
  double beta = 0.0;
  double train_loss = 0.0;
  double val_si_snr = 0.0;
  double wall_seconds = 0.0;
};

struct LearningCurve {
  std::vector<EpochRecord> records;

  static constexpr const char* kHeader = "epoch,alpha,beta,train_loss,val_si_snr,wall_seconds";

  std::string to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << kHeader << '\n';
    for (const auto& r : records) {
      os << r.epoch << ',' << r.alpha << ',' << r.beta << ',' << r.train_loss << ','
         << r.val_si_snr << ',' << r.wall_seconds << '\n';
    }
    return os.str();
  }

  void write_csv(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw TrainError("train: cannot write " + path.string());
    f << to_csv();
  }
};

struct Dataset {
  std::vector<audio::MixtureScene> scenes;
  std::vector<std::string> ids;
  std::uint32_t sample_rate = 0;
  bool reverberant = false;
};

inline Dataset load_dataset(const std::filesystem::path& dir) {
  const auto records = audio::read_manifest(dir);
  if (records.empty()) throw TrainError("dataset " + dir.string() + " is empty");
  Dataset d;
  d.sample_rate = records.front().sample_rate;
  for (const auto& r : records) {
    if (r.sample_rate != d.sample_rate) {
      throw TrainError("dataset: item " + r.id + " has sample rate " + std::to_string(r.sample_rate) +
                       ", expected " + std::to_string(d.sample_rate));
    }
    d.reverberant = d.reverberant || !r.t60_list.empty();
    d.scenes.push_back(audio::load_scene(dir, r));
    d.ids.push_back(r.id);
  }
  return d;
}

inline Dataset make_dataset(std::vector<audio::MixtureScene> scenes) {
  if (scenes.empty()) throw TrainError("dataset is empty");
  Dataset d;
  d.sample_rate = scenes.front().spec.sample_rate;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    d.reverberant = d.reverberant || !scenes[i].t60.empty();
    d.ids.push_back(audio::scene_id(i));
  }
  d.scenes = std::move(scenes);
  return d;
}

/// The last floor(fraction * n) items validate; with none held out the
/// training items double as the validation set.
struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

inline Split split_dataset(std::size_t n, double fraction) {
  if (!(fraction >= 0.0 && fraction < 1.0)) {
    throw TrainError("train: validation fraction must be in [0, 1)");
  }
  const auto n_val = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n)));
  Split s;
  for (std::size_t i = 0; i < n - n_val; ++i) s.train.push_back(i);
  for (std::size_t i = n - n_val; i < n; ++i) s.val.push_back(i);
  if (s.val.empty()) s.val = s.train;
  return s;
}

inline void check_compatible(const net::ModelConfig& m, const Dataset& d) {
  for (std::size_t i = 0; i < d.scenes.size(); ++i) {
    if (d.scenes[i].s.size() != static_cast<std::size_t>(m.num_speakers)) {
      throw TrainError("item " + d.ids[i] + " has " + std::to_string(d.scenes[i].s.size()) +
                       " speakers but the model separates " + std::to_string(m.num_speakers));
    }
  }
}

/// Mean final-stage SI-SNR (best permutation, anechoic targets).
inline double validation_si_snr(const net::ParamStore<float>& params, const net::ModelConfig& m,
                                const Dataset& d, const std::vector<std::size_t>& items) {
  double acc = 0.0;
  for (auto i : items) {
    const auto& sc = d.scenes[i];
    auto out = net::run_model(sc.y.samples, params, m, false);
    acc += objective::eval_metrics(out.s_hat, sc).si_snr;
  }
  return acc / static_cast<double>(items.size());
}

/// Stateful training loop; one call to run_epoch per epoch.
class Trainer {
 public:
  Trainer(TrainConfig cfg, const Dataset& data)
      : cfg_(std::move(cfg)), data_(data), split_(split_dataset(data.scenes.size(), cfg_.validation_fraction)) {
    if (cfg_.epochs < 0) throw TrainError("train: epochs must be non-negative");
    if (cfg_.batch_size < 1) throw TrainError("train: batch size must be positive");
    state_.model = effective_model(cfg_.model, cfg_.mode, data.reverberant);
    state_.model.validate();
    check_compatible(state_.model, data);
    state_.sample_rate = data.sample_rate;
    state_.seed = cfg_.seed;
    state_.params = net::init_params<float>(state_.model, cfg_.seed);
    state_.best_val = -std::numeric_limits<double>::infinity();
  }

  /// Continues from a saved state; the dataset and config must match the
  /// original run.
  Trainer(TrainConfig cfg, const Dataset& data, Checkpoint resume) : Trainer(std::move(cfg), data) {
    if (resume.model != state_.model) throw TrainError("train: checkpoint model does not match config");
    state_ = std::move(resume);
  }

  const Checkpoint& state() const { return state_; }
  const std::optional<Checkpoint>& best() const { return best_; }
  const Split& split() const { return split_; }

  /// Trains epoch state().epoch and returns its record (wall_seconds is the
  /// time spent in this call).
  EpochRecord run_epoch() {
    const auto t0 = std::chrono::steady_clock::now();
    const int epoch = state_.epoch;
    const auto w = objective::stage_weights(epoch);
    std::vector<std::size_t> order = split_.train;
    std::mt19937_64 rng(audio::mix_seed(state_.seed, kShuffleSalt, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    const auto bs = static_cast<std::size_t>(cfg_.batch_size);
    for (std::size_t start = 0, batch = 0; start < order.size(); start += bs, ++batch) {
      const std::size_t end = std::min(order.size(), start + bs);
      net::ParamStore<float> grads;
      for (std::size_t k = start; k < end; ++k) {
        loss_sum += accumulate_item(order[k], w, epoch, batch, grads);
      }
      const auto inv = 1.0F / static_cast<float>(end - start);
      for (auto& [n, g] : grads) g *= inv;
      const double norm = clip_global_norm(grads, cfg_.grad_clip_norm);
      if (!std::isfinite(norm)) {
        throw TrainError("train: non-finite gradient at epoch " + std::to_string(epoch) + " batch " +
                         std::to_string(batch));
      }
      optimizer_step(state_.params, grads, state_.opt, cfg_.learning_rate);
    }

    EpochRecord r;
    r.epoch = epoch;
    r.alpha = w.alpha;
    r.beta = w.beta;
    r.train_loss = loss_sum / static_cast<double>(order.size());
    r.val_si_snr = validation_si_snr(state_.params, state_.model, data_, split_.val);
    ++state_.epoch;
    if (r.val_si_snr > state_.best_val || !best_) {
      state_.best_val = std::max(state_.best_val, r.val_si_snr);
      best_ = state_;
    }
    r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
  }

 private:
  static constexpr std::uint64_t kShuffleSalt = 0x5348554646ULL;

  double accumulate_item(std::size_t item, const objective::StageWeights& w, int epoch,
                         std::size_t batch, net::ParamStore<float>& grads) {
    const auto& sc = data_.scenes[item];
    auto where = [&] {
      return " at epoch " + std::to_string(epoch) + " batch " + std::to_string(batch) + " (item " +
             data_.ids[item] + ")";
    };
    try {
      diff::Graph<float> g;
      net::BoundParams<float> p(g, state_.params, true);
      auto out = net::multistage_forward(g, sc.y.samples, p, state_.model, true);
      auto staged = objective::total_loss(out, sc, state_.model.stages, w);
      if (!std::isfinite(staged.report.total)) throw TrainError("train: NaN loss" + where());
      auto gm = g.backward(staged.loss);
      for (const auto& [name, v] : p.all()) {
        auto it = grads.find(name);
        if (it == grads.end()) {
          grads.emplace(name, gm.at(v));
        } else {
          it->second += gm.at(v);
        }
      }
      return staged.report.total;
    } catch (const diff::NumericError& e) {
      throw TrainError(std::string("train: NaN loss") + where() + ": " + e.what());
    }
  }

  TrainConfig cfg_;
  const Dataset& data_;
  Split split_;
  Checkpoint state_;
  std::optional<Checkpoint> best_;
};

struct TrainResult {
  Checkpoint final_state;
  Checkpoint best_state;
  LearningCurve curve;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

inline TrainResult train_on(const TrainConfig& cfg, const Dataset& data, const EpochCallback& on_epoch = {}) {
  Trainer t(cfg, data);
  TrainResult r;
  for (int e = 0; e < cfg.epochs; ++e) {
    r.curve.records.push_back(t.run_epoch());
    if (on_epoch) on_epoch(r.curve.records.back());
  }
  r.final_state = t.state();
  r.best_state = t.best() ? *t.best() : t.state();
  return r;
}

inline TrainResult train_run(const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  const auto data = load_dataset(cfg.dataset_dir);
  return train_on(cfg, data, on_epoch);
}

/// Final-stage metrics for every item of a dataset.
inline objective::MetricsReport evaluate_on(const Checkpoint& ckpt, const Dataset& data) {
  if (data.sample_rate != ckpt.sample_rate) {
    throw TrainError("eval: dataset sample rate " + std::to_string(data.sample_rate) +
                     " Hz does not match checkpoint " + std::to_string(ckpt.sample_rate) + " Hz");
  }
  check_compatible(ckpt.model, data);
  std::vector<objective::ItemMetrics> items;
  for (std::size_t i = 0; i < data.scenes.size(); ++i) {
    const auto& sc = data.scenes[i];
    auto out = net::run_model(sc.y.samples, ckpt.params, ckpt.model, false);
    auto m = objective::eval_metrics(out.s_hat, sc);
    m.id = data.ids[i];
    items.push_back(std::move(m));
  }
  return objective::aggregate(std::move(items));
}

inline objective::MetricsReport evaluate_run(const std::filesystem::path& ckpt_path,
                                             const std::filesystem::path& dataset_dir,
                                             const std::filesystem::path& report_path) {
  const auto ckpt = load_checkpoint(ckpt_path);
  const auto data = load_dataset(dataset_dir);
  auto report = evaluate_on(ckpt, data);
  std::ofstream f(report_path, std::ios::trunc);
  if (!f) throw TrainError("eval: cannot write " + report_path.string());
  f << objective::to_json(report).dump(2) << '\n';
  return report;
}

}  // namespace tpsep::train
