// hvl: command-line front end for bundle synthesis/validation, training,
// evaluation, scoring and the gradient self-check.
//
// Exit codes: 0 success, 2 usage/config/input error, 3 numerical failure,
// 4 verification failure.

#include "hvl/config_io.hpp"
#include "hvl/detector.hpp"
#include "hvl/embedding_store.hpp"
#include "hvl/gradcheck.hpp"
#include "hvl/hash.hpp"
#include "hvl/trainer.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace hvl;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 2;
constexpr int kNumerical = 3;
constexpr int kVerification = 4;

struct VerificationFailure : Error {
  using Error::Error;
};

fs::path resolve(const fs::path& base_dir, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : base_dir / path;
}

void require_dir(const fs::path& p, const char* what) {
  if (!fs::is_directory(p)) throw ConfigError(std::string(what) + " not found: " + p.string());
}

void require_file(const fs::path& p, const char* what) {
  if (!fs::is_regular_file(p)) throw ConfigError(std::string(what) + " not found: " + p.string());
}

// ---- synth -----------------------------------------------------------------

struct SynthArgs {
  std::string spec;
  std::string out;
  std::uint64_t seed = 0;
};

int cmd_synth(const SynthArgs& a) {
  require_file(a.spec, "synthetic spec");
  const SyntheticSpec spec = synthetic_spec_from_json(read_json_file(a.spec));
  const auto synth = generate_synthetic(spec, a.seed);
  write_bundle(synth.bundle, a.out);
  Index id = 0, ood = 0;
  for (const auto& item : synth.bundle.items) (item.labeled() ? id : ood) += 1;
  std::cout << "wrote " << a.out << ": " << id << " ID items, " << ood << " OOD items, d=" << spec.d
            << " n=" << spec.n << " C=" << spec.num_classes << "\n"
            << "bundle_hash " << to_hex(bundle_hash(a.out)) << "\n";
  Json provenance = {{"spec", to_json(spec)}, {"seed", a.seed}};
  provenance["config_hash"] = config_hash(provenance);
  write_json_file(provenance, fs::path(a.out) / "synth_config.json");
  return kOk;
}

// ---- validate --------------------------------------------------------------

int cmd_validate(const std::string& dir) {
  require_dir(dir, "bundle");
  Bundle b;
  try {
    b = load_bundle(dir);
  } catch (const FormatError& e) {
    throw VerificationFailure(e.what());
  } catch (const TruncationError& e) {
    throw VerificationFailure(e.what());
  } catch (const DataError& e) {
    throw VerificationFailure(e.what());
  }
  Index id = 0, ood = 0;
  for (const auto& item : b.items) (item.labeled() ? id : ood) += 1;
  std::cout << "valid bundle " << dir << ": " << b.items.size() << " items (" << id << " ID, " << ood
            << " OOD), d=" << b.manifest.d << " n=" << b.manifest.n << " C=" << b.manifest.num_classes << "\n"
            << "bundle_hash " << to_hex(bundle_hash(dir)) << "\n";
  return kOk;
}

// ---- train -----------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string bundle;
  std::string out;
  std::string resume;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::optional<double> lr;
  std::optional<int> stop_after;
};

int cmd_train(const TrainArgs& a) {
  require_file(a.config, "config file");
  const Json file = read_json_file(a.config);
  const fs::path base = fs::path(a.config).parent_path();
  for (const auto& [key, value] : file.items())
    if (key != "bundle" && key != "output_dir" && key != "train") throw ConfigError("config: unknown key '" + key + "'");

  TrainConfig cfg = train_config_from_json(file.value("train", Json::object()));
  if (a.seed) cfg.seed = *a.seed;
  if (a.epochs) cfg.epochs = *a.epochs;
  if (a.lr) cfg.lr = *a.lr;
  cfg.validate();

  const fs::path bundle_dir = !a.bundle.empty() ? fs::path(a.bundle) : resolve(base, file.value("bundle", ""));
  const fs::path out_dir = !a.out.empty() ? fs::path(a.out) : resolve(base, file.value("output_dir", "run"));
  require_dir(bundle_dir, "bundle");
  const Bundle bundle = load_bundle(bundle_dir);

  std::optional<Checkpoint> resume;
  if (!a.resume.empty()) {
    require_file(a.resume, "checkpoint");
    resume = read_checkpoint(a.resume);
  }

  fs::create_directories(out_dir);
  const Json effective = {{"bundle", bundle_dir.string()}, {"output_dir", out_dir.string()}, {"train", to_json(cfg)}};
  const std::string hash = config_hash(to_json(cfg));
  Json echoed = effective;
  echoed["config_hash"] = hash;
  write_json_file(echoed, out_dir / "config.json");

  TrainOptions options;
  if (a.stop_after) options.stop_after_epoch = *a.stop_after;
  std::ofstream log_out(out_dir / "train_log.jsonl", resume ? std::ios::app : std::ios::trunc);
  options.on_epoch = [&](const EpochLog& e) {
    Json j = to_json(e);
    j["config_hash"] = hash;
    log_out << j.dump() << "\n" << std::flush;
    std::cout << "epoch " << e.epoch << "  lr " << e.lr << "  l_id " << e.loss.l_id << "  l_ood " << e.loss.l_ood
              << "  total " << e.loss.total << "\n";
  };

  const TrainResult result = train(bundle, cfg, options, resume ? &*resume : nullptr);
  write_checkpoint(result.checkpoint, out_dir / "checkpoint.bin");
  std::cout << "checkpoint " << (out_dir / "checkpoint.bin").string() << " (epoch " << result.checkpoint.epoch << "/"
            << cfg.epochs << ", config_hash " << hash << ")\n";
  return kOk;
}

// ---- eval / score ----------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string bundle;
  std::string out;
};

int cmd_eval(const EvalArgs& a) {
  require_file(a.checkpoint, "checkpoint");
  require_dir(a.bundle, "bundle");
  const Checkpoint ck = read_checkpoint(a.checkpoint);
  const Bundle bundle = load_bundle(a.bundle);
  if (bundle.manifest.n != ck.config.n) throw ConfigError("bundle n does not match the checkpoint");
  const auto ev = evaluate(bundle.items, ck.params, bundle.text, ck.config.model, ck.config.n);
  const std::string hash = config_hash(to_json(ck.config));

  fs::create_directories(a.out);
  write_json_file(to_json(ev.report, hash), fs::path(a.out) / "report.json");
  write_scores(ev.scores, fs::path(a.out) / "scores.jsonl");

  auto show = [](const std::optional<double>& v) { return v ? std::to_string(*v) : std::string("absent"); };
  std::cout << "acc " << show(ev.report.acc) << "  fpr95 " << show(ev.report.fpr95) << "  auroc "
            << show(ev.report.auroc) << "  (" << ev.report.id_items << " ID, " << ev.report.ood_items << " OOD)\n";
  if (!ev.report.ood_metrics_present()) std::cout << "no OOD items: OOD metrics absent\n";
  return kOk;
}

int cmd_score(const EvalArgs& a) {
  require_file(a.checkpoint, "checkpoint");
  require_dir(a.bundle, "bundle");
  const Checkpoint ck = read_checkpoint(a.checkpoint);
  const Bundle bundle = load_bundle(a.bundle);
  if (bundle.manifest.n != ck.config.n) throw ConfigError("bundle n does not match the checkpoint");
  ck.config.model.validate(ck.config.n);
  std::vector<ScoredItem> scores;
  for (const auto& item : bundle.items)
    scores.push_back(score_item(item, ck.params, bundle.text, ck.config.model, ck.config.n));
  if (a.out.empty()) {
    for (const auto& s : scores)
      std::cout << Json{{"id", s.id}, {"label", s.label}, {"predicted", s.predicted}, {"msp", s.msp}}.dump() << "\n";
  } else {
    write_scores(scores, a.out);
    std::cout << "wrote " << scores.size() << " scores to " << a.out << "\n";
  }
  return kOk;
}

// ---- gradcheck -------------------------------------------------------------

struct GradArgs {
  GradcheckSpec spec;
  int seeds = 20;
};

int cmd_gradcheck(const GradArgs& a) {
  a.spec.validate();
  if (a.seeds < 1) throw ConfigError("--seeds must be >= 1");
  double worst = 0;
  for (int k = 0; k < a.seeds; ++k) {
    GradcheckSpec spec = a.spec;
    spec.seed = a.spec.seed + static_cast<std::uint64_t>(k);
    const auto r = run_gradcheck(spec);
    worst = std::max(worst, r.max_rel_error);
    std::printf("seed %llu: max rel error %.3e over %lld coordinates (worst %s[%lld]: analytic %.9e, numeric %.9e)\n",
                static_cast<unsigned long long>(spec.seed), r.max_rel_error, static_cast<long long>(r.coordinates),
                r.worst_block.c_str(), static_cast<long long>(r.worst_index), r.worst_analytic, r.worst_numeric);
  }
  std::printf("max relative error %.3e (tolerance %.1e)\n", worst, a.spec.tolerance);
  if (!(worst <= a.spec.tolerance)) throw VerificationFailure("gradient check failed");
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hierarchical vision-language OOD detection: training and scoring on embedding bundles"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "generate a synthetic embedding bundle");
  s->add_option("spec", synth.spec, "synthetic spec JSON");
  s->add_option("--config", synth.spec, "synthetic spec JSON (alternative to the positional)");
  s->add_option("out", synth.out, "output bundle directory")->required();
  s->add_option("--seed", synth.seed, "image sampling seed");

  std::string validate_dir;
  auto* v = app.add_subcommand("validate", "load a bundle and check every invariant");
  v->add_option("bundle", validate_dir, "bundle directory")->required();

  TrainArgs train_args;
  auto* t = app.add_subcommand("train", "train adapter and text biases");
  t->add_option("--config", train_args.config, "run config JSON {bundle, output_dir, train}")->required();
  t->add_option("--bundle", train_args.bundle, "override the training bundle directory");
  t->add_option("--out", train_args.out, "override the output directory");
  t->add_option("--resume", train_args.resume, "resume from this checkpoint");
  t->add_option("--seed", train_args.seed, "override train.seed");
  t->add_option("--epochs", train_args.epochs, "override train.epochs");
  t->add_option("--lr", train_args.lr, "override train.lr");
  t->add_option("--stop-after", train_args.stop_after, "stop after this many completed epochs (resumable)");

  EvalArgs eval_args;
  auto* e = app.add_subcommand("eval", "score a test bundle and report Acc / FPR95 / AUROC");
  e->add_option("checkpoint", eval_args.checkpoint, "checkpoint file")->required();
  e->add_option("bundle", eval_args.bundle, "test bundle directory")->required();
  e->add_option("--out", eval_args.out, "output directory for report.json and scores.jsonl")->required();

  EvalArgs score_args;
  auto* sc = app.add_subcommand("score", "write per-item MSP scores");
  sc->add_option("checkpoint", score_args.checkpoint, "checkpoint file")->required();
  sc->add_option("bundle", score_args.bundle, "bundle directory")->required();
  sc->add_option("--out", score_args.out, "JSON-lines output (stdout when omitted)");

  GradArgs grad;
  auto* g = app.add_subcommand("gradcheck", "compare analytic gradients with central differences");
  g->add_option("--d", grad.spec.d, "embedding dimension");
  g->add_option("--classes", grad.spec.num_classes, "number of classes");
  g->add_option("--n", grad.spec.n, "partition factor");
  g->add_option("--batch", grad.spec.batch, "batch size");
  g->add_option("--K", grad.spec.K, "pseudo-OOD patches per image");
  g->add_option("--tau", grad.spec.tau, "temperature");
  g->add_option("--seed", grad.spec.seed, "first fixture seed");
  g->add_option("--seeds", grad.seeds, "number of consecutive seeds");
#ifdef HVL_FAULT_INJECTION
  g->add_flag("--corrupt-gradient", grad.spec.corrupt_gradient)->group("");
#endif

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*s) {
      if (synth.spec.empty()) throw ConfigError("synth: a spec file is required");
      return cmd_synth(synth);
    }
    if (*v) return cmd_validate(validate_dir);
    if (*t) return cmd_train(train_args);
    if (*e) return cmd_eval(eval_args);
    if (*sc) return cmd_score(score_args);
    if (*g) return cmd_gradcheck(grad);
  } catch (const VerificationFailure& err) {
    std::cerr << "verification failed: " << err.what() << "\n";
    return kVerification;
  } catch (const NumericalError& err) {
    std::cerr << "numerical failure: " << err.what() << "\n";
    return kNumerical;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
