#include "hvl/trainer.hpp"

#include "hvl/config_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

namespace hvl {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(lr >= 0) || !std::isfinite(lr)) throw ConfigError("lr must be finite and >= 0");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1) || !(adam_beta2 >= 0 && adam_beta2 < 1))
    throw ConfigError("adam betas must lie in [0, 1)");
  if (!(adam_eps > 0)) throw ConfigError("adam_eps must be > 0");
  if (n < 1) throw ConfigError("n must be >= 1");
  model.validate(n);
}

ModelParams<double> init_params(Index d, Index num_classes, std::uint64_t /*seed*/) {
  require(d >= 1 && num_classes >= 1, "init_params: d and C must be >= 1");
  return zero_params<double>(d, num_classes);
}

double cosine_lr(double lr0, std::int64_t step, std::int64_t total_steps) {
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * double(step) / double(total_steps)));
}

void adam_step(ModelParams<double>& params, AdamState& state, const Gradients<double>& grads, double lr,
               const TrainConfig& cfg) {
  if (state.m.dW.size() == 0) {
    state.m = Gradients<double>::zeros_like(params);
    state.v = Gradients<double>::zeros_like(params);
  }
  ++state.step;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, double(state.step));
  const double c2 = 1.0 - std::pow(b2, double(state.step));
  auto update = [&](Matrix<double>& theta, Matrix<double>& m, Matrix<double>& v, const Matrix<double>& g) {
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g.cwiseProduct(g);
    theta.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg.adam_eps);
  };
  update(params.W, state.m.dW, state.v.dW, grads.dW);
  update(params.b0, state.m.db0, state.v.db0, grads.db0);
  update(params.b2, state.m.db2, state.v.db2, grads.db2);
}

namespace {

void shuffle(std::vector<std::size_t>& order, Rng& rng) {
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
}

std::vector<Index> random_selection(Rng& rng, Index total, Index k) {
  std::vector<Index> pool(static_cast<std::size_t>(total));
  for (Index i = 0; i < total; ++i) pool[i] = i;
  for (Index i = 0; i < k; ++i) std::swap(pool[i], pool[i + static_cast<Index>(rng.below(std::uint64_t(total - i)))]);
  pool.resize(static_cast<std::size_t>(k));
  return pool;
}

bool finite(const LossBreakdown<double>& l) { return std::isfinite(l.total) && std::isfinite(l.l_id) && std::isfinite(l.l_ood); }

}  // namespace

TrainResult train(const Bundle& bundle, const TrainConfig& cfg, const TrainOptions& options,
                  const Checkpoint* resume) {
  cfg.validate();
  const auto& m = bundle.manifest;
  if (m.n != cfg.n)
    throw ConfigError("config n = " + std::to_string(cfg.n) + " but bundle n = " + std::to_string(m.n));

  std::vector<const ImageEmbeddings*> train_items;
  std::vector<Index> per_class(static_cast<std::size_t>(m.num_classes), 0);
  for (const auto& item : bundle.items) {
    if (!item.labeled()) continue;
    train_items.push_back(&item);
    ++per_class[static_cast<std::size_t>(item.label)];
  }
  for (Index c = 0; c < m.num_classes; ++c)
    if (per_class[c] == 0) throw DataError("class '" + m.class_names[c] + "' has no labeled training items");

  TrainResult result;
  Checkpoint& ck = result.checkpoint;
  Rng rng(cfg.seed);
  if (resume) {
    ck = *resume;
    if (to_json(ck.config) != to_json(cfg)) throw ConfigError("resume: checkpoint config differs from the run config");
    if (ck.params.dim() != m.d || ck.params.num_classes() != m.num_classes)
      throw ConfigError("resume: checkpoint shapes do not match the bundle");
    rng.restore(ck.rng_state);
  } else {
    ck.params = init_params(m.d, m.num_classes, cfg.seed);
    ck.config = cfg;
    ck.epoch = 0;
  }

  const std::size_t N = train_items.size();
  const std::size_t B = static_cast<std::size_t>(cfg.batch_size);
  const std::int64_t batches_per_epoch = static_cast<std::int64_t>((N + B - 1) / B);
  const std::int64_t total_steps = batches_per_epoch * cfg.epochs;
  const Index high_patches = 4 * cfg.n * cfg.n;
  const bool random_pick = cfg.model.ablations.disable_entropy_gain_selection;

  std::vector<std::size_t> order(N);
  for (int epoch = ck.epoch; epoch < cfg.epochs; ++epoch) {
    if (options.stop_after_epoch && epoch >= *options.stop_after_epoch) break;
    for (std::size_t i = 0; i < N; ++i) order[i] = i;
    shuffle(order, rng);

    EpochLog log;
    log.epoch = epoch;
    log.lr = cosine_lr(cfg.lr, epoch * batches_per_epoch, total_steps);
    for (std::int64_t b = 0; b < batches_per_epoch; ++b) {
      const std::int64_t step = epoch * batches_per_epoch + b;
      const std::size_t begin = static_cast<std::size_t>(b) * B, end = std::min(N, begin + B);
      std::vector<const ImageEmbeddings*> batch;
      for (std::size_t i = begin; i < end; ++i) batch.push_back(train_items[order[i]]);

      std::vector<DiscreteChoices> overrides;
      if (random_pick) {
        overrides.resize(batch.size());
        for (auto& o : overrides) o.selection = random_selection(rng, high_patches, cfg.model.K);
      }
      auto obj = batch_loss_and_grads<double>(batch, ck.params, bundle.text, cfg.model, cfg.n, overrides);
      if (!finite(obj.loss) || !std::isfinite(obj.grads.squared_norm())) {
        std::string ids;
        for (const auto* it : batch) ids += (ids.empty() ? "" : ",") + it->id;
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(step) + "; batch ids: " + ids);
      }
      adam_step(ck.params, ck.adam, obj.grads, cosine_lr(cfg.lr, step, total_steps), cfg);

      // Per-epoch means are item-weighted.
      const double w = double(batch.size()) / double(N);
      log.loss.l_id += w * obj.loss.l_id;
      log.loss.l_ood += w * obj.loss.l_ood;
      for (int s = 0; s < 3; ++s) {
        log.loss.per_scale_ce[s] += w * obj.loss.per_scale_ce[s];
        log.loss.per_scale_neg_entropy[s] += w * obj.loss.per_scale_neg_entropy[s];
      }
    }
    log.loss.total = log.loss.l_id + log.loss.l_ood;
    ck.epoch = epoch + 1;
    ck.rng_state = rng.state();
    if (options.on_epoch) options.on_epoch(log);
    result.log.push_back(log);
  }
  ck.rng_state = rng.state();
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoint file:
//   8 bytes  magic "HVLCKPT\0"
//   u32 LE   format version
//   u64 LE   header length in bytes
//   header   UTF-8 JSON (shapes, config, epoch, optimizer step, rng state, block list)
//   blocks   float64 LE, column-major, in header["blocks"] order
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'H', 'V', 'L', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void put_le(std::string& out, T value) {
  for (std::size_t k = 0; k < sizeof(T); ++k) out.push_back(static_cast<char>((value >> (8 * k)) & 0xff));
}

template <typename T>
T get_le(const std::string& in, std::size_t pos) {
  T value = 0;
  for (std::size_t k = 0; k < sizeof(T); ++k)
    value |= static_cast<T>(static_cast<unsigned char>(in[pos + k])) << (8 * k);
  return value;
}

}  // namespace

void write_checkpoint(const Checkpoint& ck, const fs::path& path) {
  const Json config = to_json(ck.config);
  const Index d = ck.params.dim(), C = ck.params.num_classes();
  AdamState adam = ck.adam;
  if (adam.m.dW.size() == 0) {
    adam.m = Gradients<double>::zeros_like(ck.params);
    adam.v = Gradients<double>::zeros_like(ck.params);
  }
  const std::vector<std::pair<std::string, const Matrix<double>*>> blocks = {
      {"W", &ck.params.W},   {"b0", &ck.params.b0},     {"b2", &ck.params.b2},
      {"adam_m_W", &adam.m.dW}, {"adam_m_b0", &adam.m.db0}, {"adam_m_b2", &adam.m.db2},
      {"adam_v_W", &adam.v.dW}, {"adam_v_b0", &adam.v.db0}, {"adam_v_b2", &adam.v.db2}};

  Json header = {{"format_version", kCheckpointVersion},
                 {"d", d},
                 {"num_classes", C},
                 {"epoch", ck.epoch},
                 {"adam_step", adam.step},
                 {"rng_state", ck.rng_state},
                 {"config", config},
                 {"config_hash", config_hash(config)},
                 {"layout", "float64 little-endian, column-major"}};
  Json list = Json::array();
  for (const auto& [name, mat] : blocks) list.push_back({{"name", name}, {"rows", mat->rows()}, {"cols", mat->cols()}});
  header["blocks"] = list;

  std::string bytes(kMagic, sizeof kMagic);
  const std::string text = header.dump();
  put_le<std::uint32_t>(bytes, kCheckpointVersion);
  put_le<std::uint64_t>(bytes, text.size());
  bytes += text;
  for (const auto& [name, mat] : blocks)
    for (Index i = 0; i < mat->size(); ++i) put_le<std::uint64_t>(bytes, std::bit_cast<std::uint64_t>(mat->data()[i]));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed: " + path.string());
}

Checkpoint read_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
    throw FormatError(path.string() + " is not a checkpoint");
  if (get_le<std::uint32_t>(bytes, 8) != kCheckpointVersion) throw FormatError("unsupported checkpoint version");
  const auto header_len = get_le<std::uint64_t>(bytes, 12);
  if (20 + header_len > bytes.size()) throw TruncationError("checkpoint header truncated");

  Checkpoint ck;
  Json header;
  std::size_t pos = 20 + header_len;
  try {
    header = Json::parse(bytes.substr(20, header_len));
    ck.config = train_config_from_json(header.at("config"));
    ck.epoch = header.at("epoch").get<int>();
    ck.rng_state = header.at("rng_state").get<std::string>();
    ck.adam.step = header.at("adam_step").get<std::int64_t>();

    std::vector<Matrix<double>*> targets = {&ck.params.W, &ck.params.b0, &ck.params.b2,
                                            &ck.adam.m.dW, &ck.adam.m.db0, &ck.adam.m.db2,
                                            &ck.adam.v.dW, &ck.adam.v.db0, &ck.adam.v.db2};
    const Json& list = header.at("blocks");
    if (list.size() != targets.size()) throw FormatError("checkpoint: unexpected block count");
    for (std::size_t b = 0; b < targets.size(); ++b) {
      const Index rows = list[b].at("rows").get<Index>(), cols = list[b].at("cols").get<Index>();
      if (pos + std::size_t(rows * cols) * 8 > bytes.size()) throw TruncationError("checkpoint blocks truncated");
      targets[b]->resize(rows, cols);
      for (Index i = 0; i < rows * cols; ++i, pos += 8)
        targets[b]->data()[i] = std::bit_cast<double>(get_le<std::uint64_t>(bytes, pos));
    }
  } catch (const Json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  if (pos != bytes.size()) throw FormatError("checkpoint has trailing bytes");
  return ck;
}

void write_train_log(const std::vector<EpochLog>& log, const fs::path& path, const std::string& hash) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  for (const auto& e : log) {
    Json j = to_json(e);
    if (!hash.empty()) j["config_hash"] = hash;
    out << j.dump() << "\n";
  }
}

}  // namespace hvl
