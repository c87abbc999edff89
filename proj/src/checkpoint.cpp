#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include <json.hpp>

#include "mrvi/errors.hpp"
#include "mrvi/trainer.hpp"

namespace mrvi {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[6] = {'P', 'S', 'E', 'G', '1', '\0'};

json model_to_json(const ModelConfig& c) {
  return json{{"height", c.height},   {"width", c.width},     {"experts", c.experts},
              {"latent_channels", c.latent_channels},        {"tau_dim", c.tau_dim},
              {"hidden", c.hidden},   {"use_tau", c.use_tau}, {"use_z", c.use_z}};
}

ModelConfig model_from_json(const json& j) {
  ModelConfig c;
  c.height = j.at("height");
  c.width = j.at("width");
  c.experts = j.at("experts");
  c.latent_channels = j.at("latent_channels");
  c.tau_dim = j.at("tau_dim");
  c.hidden = j.at("hidden");
  c.use_tau = j.at("use_tau");
  c.use_z = j.at("use_z");
  return c;
}

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
double from_nullable(const json& j) {
  return j.is_null() ? std::numeric_limits<double>::infinity() : j.get<double>();
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(std::uint8_t(v >> (8 * b)));
}

void put_f64(std::vector<std::uint8_t>& out, const Eigen::VectorXd& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const auto bits = std::bit_cast<std::uint64_t>(v[i]);
    for (int b = 0; b < 8; ++b) out.push_back(std::uint8_t(bits >> (8 * b)));
  }
}

Eigen::VectorXd get_f64(const std::vector<std::uint8_t>& in, std::size_t offset, std::size_t count) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(count));
  for (std::size_t i = 0; i < count; ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= std::uint64_t(in[offset + i * 8 + std::size_t(b)]) << (8 * b);
    v[Eigen::Index(i)] = std::bit_cast<double>(bits);
  }
  return v;
}

}  // namespace

void save_checkpoint(const fs::path& path, const Checkpoint& c) {
  const std::size_t n = c.params.parameter_count();
  if (std::size_t(c.adam.m.size()) != n || std::size_t(c.adam.v.size()) != n)
    throw DimensionError("checkpoint moment vectors do not match the parameter count");
  const json header = {{"model", model_to_json(c.params.config)},
                       {"parameter_count", n},
                       {"seed", c.seed},
                       {"epoch", c.epoch},
                       {"step", c.step},
                       {"val_loss", finite_or_null(c.val_loss)},
                       {"best_val", finite_or_null(c.best_val)},
                       {"best_epoch", c.best_epoch},
                       {"stale_epochs", c.stale_epochs}};
  const std::string text = header.dump();
  std::vector<std::uint8_t> bytes(std::begin(kMagic), std::end(kMagic));
  put_u32(bytes, std::uint32_t(text.size()));
  bytes.insert(bytes.end(), text.begin(), text.end());
  put_f64(bytes, c.params.flatten());
  put_f64(bytes, c.adam.m);
  put_f64(bytes, c.adam.v);

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!os) throw IoError("short write to " + path.string());
}

Checkpoint load_checkpoint(const fs::path& path, const ModelConfig* expected) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  const std::vector<std::uint8_t> bytes(std::istreambuf_iterator<char>(is), {});
  const std::string where = "checkpoint " + path.filename().string();
  if (bytes.size() < 10 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
    throw CorruptCheckpointError(where + ": bad magic");
  std::uint32_t header_len = 0;
  for (int b = 0; b < 4; ++b) header_len |= std::uint32_t(bytes[6 + std::size_t(b)]) << (8 * b);
  if (bytes.size() < 10 + std::size_t(header_len)) throw CorruptCheckpointError(where + ": truncated header");

  Checkpoint c;
  std::size_t n = 0;
  try {
    const json h = json::parse(bytes.begin() + 10, bytes.begin() + 10 + header_len);
    c.params = zero_model(model_from_json(h.at("model")));
    n = h.at("parameter_count");
    c.seed = h.at("seed");
    c.epoch = h.at("epoch");
    c.step = h.at("step");
    c.val_loss = from_nullable(h.at("val_loss"));
    c.best_val = from_nullable(h.at("best_val"));
    c.best_epoch = h.at("best_epoch");
    c.stale_epochs = h.at("stale_epochs");
  } catch (const json::exception& e) {
    throw CorruptCheckpointError(where + ": bad header: " + e.what());
  } catch (const ConfigError& e) {
    throw CorruptCheckpointError(where + ": bad model header: " + e.what());
  }
  if (expected && !(*expected == c.params.config))
    throw ConfigError(where + ": model hyperparameters in the header differ from the configuration");
  if (n != c.params.parameter_count())
    throw CorruptCheckpointError(where + ": header parameter count " + std::to_string(n) + " != model's " +
                                 std::to_string(c.params.parameter_count()));
  const std::size_t body = 10 + std::size_t(header_len);
  if (bytes.size() != body + 3 * n * 8)
    throw CorruptCheckpointError(where + ": expected " + std::to_string(body + 3 * n * 8) + " bytes, found " +
                                 std::to_string(bytes.size()));
  c.params.unflatten(get_f64(bytes, body, n));
  c.adam.m = get_f64(bytes, body + n * 8, n);
  c.adam.v = get_f64(bytes, body + 2 * n * 8, n);
  return c;
}

}  // namespace mrvi
