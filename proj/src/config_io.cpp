#include "hvl/config_io.hpp"

#include "hvl/hash.hpp"

#include <fstream>
#include <set>

namespace hvl {

namespace {

template <typename T>
void read_key(const Json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

void reject_unknown(const Json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (const auto& [key, value] : j.items())
    if (!known.contains(key)) throw ConfigError(where + ": unknown key '" + key + "'");
}

const std::set<std::string> kAblationKeys = {"disable_ood_loss", "disable_entropy_gain_selection",
                                             "disable_cross_scale_fusion", "disable_lower_scale_propagation"};
const std::set<std::string> kModelKeys = {"K", "tau", "lambda_ood", "renormalize_aggregates", "ablations"};

Json ablations_json(const Ablations& a) {
  return {{"disable_ood_loss", a.disable_ood_loss},
          {"disable_entropy_gain_selection", a.disable_entropy_gain_selection},
          {"disable_cross_scale_fusion", a.disable_cross_scale_fusion},
          {"disable_lower_scale_propagation", a.disable_lower_scale_propagation}};
}

void read_model_keys(const Json& j, ModelConfig& cfg) {
  read_key(j, "K", cfg.K);
  read_key(j, "tau", cfg.alignment.tau);
  read_key(j, "lambda_ood", cfg.lambda_ood);
  read_key(j, "renormalize_aggregates", cfg.alignment.renormalize_aggregates);
  if (j.contains("ablations")) {
    const Json& a = j.at("ablations");
    reject_unknown(a, kAblationKeys, "ablations");
    read_key(a, "disable_ood_loss", cfg.ablations.disable_ood_loss);
    read_key(a, "disable_entropy_gain_selection", cfg.ablations.disable_entropy_gain_selection);
    read_key(a, "disable_cross_scale_fusion", cfg.ablations.disable_cross_scale_fusion);
    read_key(a, "disable_lower_scale_propagation", cfg.ablations.disable_lower_scale_propagation);
  }
}

}  // namespace

Json to_json(const ModelConfig& cfg) {
  return {{"K", cfg.K},
          {"tau", cfg.alignment.tau},
          {"lambda_ood", cfg.lambda_ood},
          {"renormalize_aggregates", cfg.alignment.renormalize_aggregates},
          {"ablations", ablations_json(cfg.ablations)}};
}

ModelConfig model_config_from_json(const Json& j, ModelConfig base) {
  reject_unknown(j, kModelKeys, "model config");
  read_model_keys(j, base);
  return base;
}

Json to_json(const TrainConfig& cfg) {
  Json j = to_json(cfg.model);
  j["epochs"] = cfg.epochs;
  j["batch_size"] = cfg.batch_size;
  j["lr"] = cfg.lr;
  j["adam_beta1"] = cfg.adam_beta1;
  j["adam_beta2"] = cfg.adam_beta2;
  j["adam_eps"] = cfg.adam_eps;
  j["seed"] = cfg.seed;
  j["n"] = cfg.n;
  return j;
}

TrainConfig train_config_from_json(const Json& j, TrainConfig base) {
  std::set<std::string> known = kModelKeys;
  known.insert({"epochs", "batch_size", "lr", "adam_beta1", "adam_beta2", "adam_eps", "seed", "n"});
  reject_unknown(j, known, "train config");
  read_model_keys(j, base.model);
  read_key(j, "epochs", base.epochs);
  read_key(j, "batch_size", base.batch_size);
  read_key(j, "lr", base.lr);
  read_key(j, "adam_beta1", base.adam_beta1);
  read_key(j, "adam_beta2", base.adam_beta2);
  read_key(j, "adam_eps", base.adam_eps);
  read_key(j, "seed", base.seed);
  read_key(j, "n", base.n);
  return base;
}

Json to_json(const SyntheticSpec& s) {
  return {{"d", s.d},
          {"n", s.n},
          {"num_classes", s.num_classes},
          {"id_per_class", s.id_per_class},
          {"ood_count", s.ood_count},
          {"sigma_between", s.sigma_between},
          {"sigma_within", s.sigma_within},
          {"sigma_text", s.sigma_text},
          {"lesion_fraction", s.lesion_fraction},
          {"ood_mix_min", s.ood_mix_min},
          {"ood_mix_max", s.ood_mix_max},
          {"world_seed", s.world_seed}};
}

SyntheticSpec synthetic_spec_from_json(const Json& j, SyntheticSpec s) {
  reject_unknown(j,
                 {"d", "n", "num_classes", "id_per_class", "ood_count", "sigma_between", "sigma_within", "sigma_text",
                  "lesion_fraction", "ood_mix_min", "ood_mix_max", "world_seed"},
                 "synthetic spec");
  read_key(j, "d", s.d);
  read_key(j, "n", s.n);
  read_key(j, "num_classes", s.num_classes);
  read_key(j, "id_per_class", s.id_per_class);
  read_key(j, "ood_count", s.ood_count);
  read_key(j, "sigma_between", s.sigma_between);
  read_key(j, "sigma_within", s.sigma_within);
  read_key(j, "sigma_text", s.sigma_text);
  read_key(j, "lesion_fraction", s.lesion_fraction);
  read_key(j, "ood_mix_min", s.ood_mix_min);
  read_key(j, "ood_mix_max", s.ood_mix_max);
  read_key(j, "world_seed", s.world_seed);
  return s;
}

std::string config_hash(const Json& j) { return to_hex(fnv1a64(j.dump())); }

Json to_json(const EvalReport& r, const std::string& hash) {
  auto opt = [](const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); };
  return {{"acc", opt(r.acc)},
          {"fpr95", opt(r.fpr95)},
          {"auroc", opt(r.auroc)},
          {"threshold_used", opt(r.threshold_used)},
          {"ood_metrics_present", r.ood_metrics_present()},
          {"counts", {{"id_items", r.id_items}, {"ood_items", r.ood_items}}},
          {"config_hash", hash}};
}

Json to_json(const EpochLog& log) {
  return {{"epoch", log.epoch}, {"lr", log.lr}, {"l_id", log.loss.l_id}, {"l_ood", log.loss.l_ood},
          {"total", log.loss.total}};
}

void write_scores(std::span<const ScoredItem> scores, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  for (const auto& s : scores)
    out << Json{{"id", s.id}, {"label", s.label}, {"predicted", s.predicted}, {"msp", s.msp}}.dump() << "\n";
  if (!out) throw Error("write failed: " + path.string());
}

std::vector<ScoredItem> read_scores(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<ScoredItem> scores;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      const Json j = Json::parse(line);
      ScoredItem s;
      s.id = j.at("id").get<std::string>();
      s.label = j.at("label").get<int>();
      s.predicted = j.at("predicted").get<Index>();
      s.msp = j.at("msp").get<double>();
      scores.push_back(std::move(s));
    } catch (const Json::exception& e) {
      throw FormatError(path.string() + ": " + e.what());
    }
  }
  return scores;
}

Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_json_file(const Json& j, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << j.dump(2) << "\n";
  if (!out) throw Error("write failed: " + path.string());
}

}  // namespace hvl
