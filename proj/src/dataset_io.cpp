#include <zlib.h>

#include <bit>
#include <fstream>
#include <iterator>

#include <json.hpp>

#include "mrvi/datasynth.hpp"
#include "mrvi/errors.hpp"

namespace mrvi {

namespace fs = std::filesystem;
using nlohmann::json;

std::uint32_t crc32_bytes(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  crc = ::crc32(crc, bytes.data(), uInt(bytes.size()));
  return std::uint32_t(crc);
}

namespace {

constexpr int kContainerVersion = 1;

std::vector<std::uint8_t> encode_f32(const Tensor& t) {
  std::vector<std::uint8_t> out(t.size() * 4);
  for (std::size_t i = 0; i < t.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(float(t[i]));
    for (int b = 0; b < 4; ++b) out[i * 4 + std::size_t(b)] = std::uint8_t(bits >> (8 * b));
  }
  return out;
}

Tensor decode_f32(const std::vector<std::uint8_t>& bytes, Shape shape) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= std::uint32_t(bytes[i * 4 + std::size_t(b)]) << (8 * b);
    t[i] = double(std::bit_cast<float>(bits));
  }
  return t;
}

void write_file(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + p.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!os) throw IoError("short write to " + p.string());
}

std::vector<std::uint8_t> read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw CorruptDatasetError("missing file " + p.filename().string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(is), {});
}

json spec_to_json(const SceneSpec& s) {
  return json{{"height", s.height},         {"width", s.width},           {"blob_min", s.blob_min},
              {"blob_max", s.blob_max},     {"radius_min", s.radius_min}, {"radius_max", s.radius_max},
              {"blur_sigma", s.blur_sigma}, {"noise_std", s.noise_std}};
}

SceneSpec spec_from_json(const json& j) {
  SceneSpec s;
  s.height = j.at("height");
  s.width = j.at("width");
  s.blob_min = j.at("blob_min");
  s.blob_max = j.at("blob_max");
  s.radius_min = j.at("radius_min");
  s.radius_max = j.at("radius_max");
  s.blur_sigma = j.at("blur_sigma");
  s.noise_std = j.at("noise_std");
  return s;
}

std::string img_name(std::size_t i) { return "img_" + std::to_string(i) + ".f32"; }
std::string soft_name(std::size_t i) { return "soft_" + std::to_string(i) + ".f32"; }
std::string mask_name(std::size_t i, int r) { return "mask_" + std::to_string(i) + "_" + std::to_string(r) + ".u8"; }

}  // namespace

void write_dataset(const fs::path& dir, const Dataset& d) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  json files = json::object();
  json scene_ids = json::array();
  const std::size_t pixels = d.meta.pixels();
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    const Sample& s = d.samples[i];
    scene_ids.push_back(s.scene_id);
    auto put = [&](const std::string& name, const std::vector<std::uint8_t>& bytes) {
      write_file(dir / name, bytes);
      files[name] = crc32_bytes(bytes);
    };
    put(img_name(i), encode_f32(s.image));
    put(soft_name(i), encode_f32(s.soft_truth));
    for (std::size_t r = 0; r < s.masks.size(); ++r) {
      std::vector<std::uint8_t> bytes(s.masks[r].data(), s.masks[r].data() + pixels);
      put(mask_name(i, s.rater_ids[r]), bytes);
    }
  }

  json profiles = json::array();
  for (const auto& p : d.profiles)
    profiles.push_back({{"rater_id", p.rater_id},
                        {"bias", to_string(p.bias)},
                        {"magnitude", p.magnitude},
                        {"jitter_std", p.jitter_std}});

  json manifest = {{"version", kContainerVersion},
                   {"H", d.meta.height},
                   {"W", d.meta.width},
                   {"N", d.meta.raters},
                   {"K", d.meta.classes},
                   {"sample_count", d.meta.sample_count},
                   {"seed", d.meta.seed},
                   {"scene", spec_to_json(d.spec)},
                   {"rater_profiles", profiles},
                   {"scene_ids", scene_ids},
                   {"crc32", files}};
  const std::string text = manifest.dump(2) + "\n";
  write_file(dir / "manifest.json", std::vector<std::uint8_t>(text.begin(), text.end()));
}

Dataset read_dataset(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) throw CorruptDatasetError("missing file manifest.json in " + dir.string());
  json m;
  try {
    std::ifstream is(manifest_path);
    m = json::parse(is);
  } catch (const json::exception& e) {
    throw CorruptDatasetError("manifest.json: " + std::string(e.what()));
  }

  Dataset d;
  try {
    if (m.at("version").get<int>() != kContainerVersion) throw CorruptDatasetError("manifest.json: unsupported version");
    d.meta.height = m.at("H");
    d.meta.width = m.at("W");
    d.meta.raters = m.at("N");
    d.meta.classes = m.at("K");
    d.meta.sample_count = m.at("sample_count");
    d.meta.seed = m.at("seed");
    d.spec = spec_from_json(m.at("scene"));
    for (const auto& p : m.at("rater_profiles"))
      d.profiles.push_back(RaterProfile{p.at("rater_id").get<int>(), bias_kind_from_string(p.at("bias")),
                                        p.at("magnitude").get<double>(), p.at("jitter_std").get<double>()});
  } catch (const json::exception& e) {
    throw CorruptDatasetError("manifest.json: " + std::string(e.what()));
  }
  if (d.profiles.size() != d.meta.raters)
    throw CorruptDatasetError("manifest.json: N=" + std::to_string(d.meta.raters) + " but " +
                              std::to_string(d.profiles.size()) + " rater profiles");
  const json& crcs = m.at("crc32");
  const json& scene_ids = m.at("scene_ids");
  if (scene_ids.size() != d.meta.sample_count) throw CorruptDatasetError("manifest.json: scene_ids length mismatch");

  // Every mask file the manifest promises must be listed.
  std::size_t listed_masks = 0;
  for (auto it = crcs.begin(); it != crcs.end(); ++it)
    if (it.key().rfind("mask_", 0) == 0) ++listed_masks;
  if (listed_masks != d.meta.sample_count * d.meta.raters)
    throw CorruptDatasetError("manifest.json: expected " + std::to_string(d.meta.sample_count * d.meta.raters) +
                              " mask files, found " + std::to_string(listed_masks));

  const std::size_t pixels = d.meta.pixels();
  auto load = [&](const std::string& name, std::size_t expected_bytes) {
    if (!crcs.contains(name)) throw CorruptDatasetError("missing file " + name + " (not in manifest)");
    std::vector<std::uint8_t> bytes = read_file(dir / name);
    if (bytes.size() != expected_bytes)
      throw CorruptDatasetError(name + ": expected " + std::to_string(expected_bytes) + " bytes, found " +
                                std::to_string(bytes.size()));
    if (crc32_bytes(bytes) != crcs.at(name).get<std::uint32_t>()) throw CorruptDatasetError(name + ": checksum mismatch");
    return bytes;
  };

  for (std::size_t i = 0; i < d.meta.sample_count; ++i) {
    Sample s;
    s.scene_id = scene_ids.at(i).get<std::uint64_t>();
    s.image = decode_f32(load(img_name(i), pixels * 4), {1, d.meta.height, d.meta.width});
    s.soft_truth = decode_f32(load(soft_name(i), pixels * 4), {d.meta.height, d.meta.width});
    for (const auto& p : d.profiles) {
      const std::string name = mask_name(i, p.rater_id);
      std::vector<std::uint8_t> bytes = load(name, pixels);
      Mask mask(Eigen::Index(d.meta.height), Eigen::Index(d.meta.width));
      for (std::size_t k = 0; k < pixels; ++k) {
        if (bytes[k] > 1) throw CorruptDatasetError(name + ": non-binary mask value");
        mask.data()[k] = bytes[k];
      }
      s.masks.push_back(std::move(mask));
      s.rater_ids.push_back(p.rater_id);
    }
    d.samples.push_back(std::move(s));
  }
  return d;
}

}  // namespace mrvi
