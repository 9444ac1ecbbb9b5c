// tpsep: synth | train | eval | separate | inspect

#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <string>

#include <CLI11.hpp>

#include "tpsep/audio/manifest.hpp"
#include "tpsep/audio/spectrogram.hpp"
#include "tpsep/audio/synth.hpp"
#include "tpsep/audio/wav.hpp"
#include "tpsep/net/config.hpp"
#include "tpsep/net/inference.hpp"
#include "tpsep/runtime.hpp"
#include "tpsep/train/checkpoint.hpp"
#include "tpsep/train/trainer.hpp"

namespace fs = std::filesystem;
using namespace tpsep;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec || !fs::is_directory(p)) throw UsageError("cannot create directory " + p.string());
}

struct SynthArgs {
  std::string out;
  std::size_t num = 0;
  std::uint64_t seed = 0;
  std::uint32_t sr = 8000;
  double duration = 1.0;
  int speakers = 2;
  double snr_min = -6.0;
  double snr_max = 3.0;
  double t60_min = 0.1;
  double t60_max = 0.4;
  bool no_reverb = false;
};

void run_synth(const SynthArgs& a) {
  if (a.num == 0) throw UsageError("--num must be at least 1");
  if (a.sr == 0) throw UsageError("--sr must be positive");
  if (!(a.duration >= 0.25)) throw UsageError("--duration must be at least 0.25 seconds");
  if (a.speakers < 2 || a.speakers > static_cast<int>(objective::kMaxPitSpeakers)) {
    throw UsageError("--speakers must be between 2 and " + std::to_string(objective::kMaxPitSpeakers));
  }
  if (a.snr_min > a.snr_max) throw UsageError("--snr-min must not exceed --snr-max");
  if (!a.no_reverb) {
    if (!(a.t60_min > 0.0)) throw UsageError("--t60-min must be positive");
    if (a.t60_min > a.t60_max) throw UsageError("--t60-min must not exceed --t60-max");
  }
  audio::CorpusSpec c;
  c.num_scenes = a.num;
  c.seed = a.seed;
  c.sample_rate = a.sr;
  c.duration = a.duration;
  c.num_speakers = a.speakers;
  c.snr_min = a.snr_min;
  c.snr_max = a.snr_max;
  c.t60_min = a.t60_min;
  c.t60_max = a.t60_max;
  c.reverb_enabled = !a.no_reverb;
  ensure_dir(a.out);
  audio::save_dataset(audio::synthesize(c), a.out);
}

struct TrainArgs {
  std::string data, model_config, mode, out;
  int epochs = 0;
  std::uint64_t seed = 0;
};

void run_train(const TrainArgs& a) {
  if (a.epochs < 1) throw UsageError("--epochs must be at least 1");
  train::TrainConfig cfg;
  cfg.epochs = a.epochs;
  cfg.seed = a.seed;
  cfg.mode = train::parse_mode(a.mode);
  cfg.dataset_dir = a.data;
  cfg.model = net::load_config(a.model_config);
  ensure_dir(a.out);
  const fs::path out(a.out);
  auto r = train::train_run(cfg);
  train::save_checkpoint(r.best_state, out / "best.ckpt");
  train::save_checkpoint(r.final_state, out / "final.ckpt");
  r.curve.write_csv(out / "curve.csv");
}

struct IoArgs {
  std::string ckpt, in, out;
};

struct LoadedInput {
  train::Checkpoint ckpt;
  audio::Waveform wave;
};

LoadedInput load_input(const IoArgs& a, const char* cmd) {
  LoadedInput li{train::load_checkpoint(a.ckpt), audio::read_wav(a.in)};
  if (li.wave.sample_rate != li.ckpt.sample_rate) {
    throw UsageError(std::string(cmd) + ": input sample rate " + std::to_string(li.wave.sample_rate) +
                     " Hz does not match model sample rate " + std::to_string(li.ckpt.sample_rate) + " Hz");
  }
  return li;
}

void write_wave(const std::vector<float>& x, std::uint32_t sr, const fs::path& path) {
  audio::write_wav(audio::Waveform{x, sr}, path);
}

void run_separate(const IoArgs& a) {
  auto li = load_input(a, "separate");
  ensure_dir(a.out);
  auto d = net::run_model(li.wave.samples, li.ckpt.params, li.ckpt.model, false);
  for (std::size_t k = 0; k < d.s_hat.size(); ++k) {
    write_wave(d.s_hat[k], li.wave.sample_rate, fs::path(a.out) / ("est_" + std::to_string(k) + ".wav"));
  }
}

/// stage<S>[_<k>].wav and .pgm for every decodable stage, plus input.pgm.
void run_inspect(const IoArgs& a) {
  auto li = load_input(a, "inspect");
  ensure_dir(a.out);
  const fs::path out(a.out);
  const auto sr = li.wave.sample_rate;
  auto d = net::run_model(li.wave.samples, li.ckpt.params, li.ckpt.model, true);
  auto emit = [&](const std::vector<float>& x, const std::string& stem) {
    write_wave(x, sr, out / (stem + ".wav"));
    audio::write_pgm(audio::spectrogram(x), out / (stem + ".pgm"));
  };
  audio::write_pgm(audio::spectrogram(li.wave.samples), out / "input.pgm");
  const int stages = li.ckpt.model.stages;
  if (stages >= 2) emit(d.z_hat, "stage1");
  for (std::size_t k = 0; k < d.m_hat.size(); ++k) emit(d.m_hat[k], "stage2_" + std::to_string(k));
  const std::string final_stem = "stage" + std::to_string(stages) + "_";
  for (std::size_t k = 0; k < d.s_hat.size(); ++k) emit(d.s_hat[k], final_stem + std::to_string(k));
}

struct EvalArgs {
  std::string ckpt, data, report;
};

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Multi-stage triple-path speech separation"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  synth->add_option("--out", sa.out, "output dataset directory")->required();
  synth->add_option("--num", sa.num, "number of scenes")->required();
  synth->add_option("--seed", sa.seed, "random seed")->required();
  synth->add_option("--sr", sa.sr, "sample rate in Hz")->capture_default_str();
  synth->add_option("--duration", sa.duration, "scene length in seconds")->capture_default_str();
  synth->add_option("--speakers", sa.speakers, "speakers per scene")->capture_default_str();
  synth->add_option("--snr-min", sa.snr_min, "minimum speech-to-noise ratio in dB")->capture_default_str();
  synth->add_option("--snr-max", sa.snr_max, "maximum speech-to-noise ratio in dB")->capture_default_str();
  synth->add_option("--t60-min", sa.t60_min, "minimum reverberation time in seconds")->capture_default_str();
  synth->add_option("--t60-max", sa.t60_max, "maximum reverberation time in seconds")->capture_default_str();
  synth->add_flag("--no-reverb", sa.no_reverb, "anechoic mixtures (noise only)");

  TrainArgs ta;
  auto* trn = app.add_subcommand("train", "train a model");
  trn->add_option("--data", ta.data, "dataset directory")->required();
  trn->add_option("--model-config", ta.model_config, "model config JSON")->required();
  trn->add_option("--mode", ta.mode, "single or multi")->required();
  trn->add_option("--epochs", ta.epochs, "training epochs")->required();
  trn->add_option("--seed", ta.seed, "random seed")->required();
  trn->add_option("--out", ta.out, "output directory")->required();

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "score a checkpoint on a dataset");
  ev->add_option("--ckpt", ea.ckpt, "checkpoint file")->required();
  ev->add_option("--data", ea.data, "dataset directory")->required();
  ev->add_option("--report", ea.report, "output JSON report")->required();

  IoArgs sep_args, insp_args;
  auto* sep = app.add_subcommand("separate", "separate one mixture");
  sep->add_option("--ckpt", sep_args.ckpt, "checkpoint file")->required();
  sep->add_option("--in", sep_args.in, "input WAV")->required();
  sep->add_option("--out", sep_args.out, "output directory")->required();
  auto* insp = app.add_subcommand("inspect", "write every stage output and its spectrogram");
  insp->add_option("--ckpt", insp_args.ckpt, "checkpoint file")->required();
  insp->add_option("--in", insp_args.in, "input WAV")->required();
  insp->add_option("--out", insp_args.out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "tpsep: %s\n", e.what());
    return 1;
  }

  try {
    if (*synth) run_synth(sa);
    if (*trn) run_train(ta);
    if (*ev) train::evaluate_run(ea.ckpt, ea.data, ea.report);
    if (*sep) run_separate(sep_args);
    if (*insp) run_inspect(insp_args);
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (auto& c : msg) {
      if (c == '\n' || c == '\r') c = ' ';
    }
    std::fprintf(stderr, "tpsep: %s\n", msg.c_str());
    return 1;
  }
  return 0;
}
