#pragma once

// Wire formats: paired-sample and anchor JSONL, the binary checkpoint, and
// small JSON helpers shared by the command-line tool.

#include "fmfi/classify.hpp"
#include "fmfi/common.hpp"
#include "fmfi/dataset.hpp"
#include "fmfi/distill.hpp"
#include "fmfi/encoder.hpp"
#include "fmfi/pointcloud.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace fmfi {

using json = nlohmann::json;

/// Writes to a sibling temporary file and renames it into place.
inline void atomic_write(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::Io, "cannot open " + tmp.string() + " for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw Error(ErrorKind::Io, "write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------- JSONL ----

inline json to_json(const PairedSample& s) {
  json frame = json::array();
  for (const RadarPoint& p : s.frame.points) frame.push_back({p.x, p.y, p.z, p.doppler, p.intensity});
  json j;
  j["frame"] = std::move(frame);
  j["teacher_embedding"] = s.teacher;
  if (s.label) j["label"] = *s.label;
  j["timestamp_ms"] = s.timestamp_ms;
  return j;
}

inline json to_json(const TextAnchor& a) {
  return json{{"class", a.class_name}, {"prompt", a.prompt}, {"embedding", a.embedding}};
}

template <class T>
std::string to_jsonl(const std::vector<T>& items) {
  std::string out;
  for (const T& item : items) {
    out += to_json(item).dump();
    out += '\n';
  }
  return out;
}

inline void write_paired(const std::filesystem::path& path, const Dataset& data) { atomic_write(path, to_jsonl(data)); }

inline void write_anchors(const std::filesystem::path& path, const std::vector<TextAnchor>& anchors) {
  atomic_write(path, to_jsonl(anchors));
}

template <class T>
struct LoadResult {
  std::vector<T> items;
  std::vector<std::string> warnings;
};

namespace detail {

inline std::vector<double> read_vector(const json& j, const char* field, std::size_t line, std::size_t expected) {
  if (!j.contains(field) || !j[field].is_array()) throw SchemaError(line, std::string("missing array '") + field + "'");
  const json& arr = j[field];
  if (expected > 0 && arr.size() != expected)
    throw SchemaError(line, std::string("'") + field + "' has " + std::to_string(arr.size()) + " values, expected " +
                                std::to_string(expected));
  std::vector<double> v;
  v.reserve(arr.size());
  for (const json& x : arr) {
    if (!x.is_number()) throw SchemaError(line, std::string("non-numeric value in '") + field + "'");
    const double d = x.get<double>();
    if (!std::isfinite(d)) throw SchemaError(line, std::string("non-finite value in '") + field + "'");
    v.push_back(d);
  }
  return v;
}

template <class T, class Parse>
LoadResult<T> load_jsonl(const std::filesystem::path& path, Parse&& parse) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  LoadResult<T> result;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::exception& e) {
      throw SchemaError(line, std::string("malformed JSON: ") + e.what());
    }
    if (!j.is_object()) throw SchemaError(line, "record is not a JSON object");
    try {
      result.items.push_back(parse(j, line));
    } catch (const json::exception& e) {
      throw SchemaError(line, e.what());
    }
  }
  if (result.items.empty()) result.warnings.push_back(path.string() + ": no records");
  return result;
}

}  // namespace detail

/// Loads paired records; every teacher embedding must have `dim` values.
inline LoadResult<PairedSample> load_paired(const std::filesystem::path& path, std::size_t dim = kEmbeddingDim) {
  return detail::load_jsonl<PairedSample>(path, [dim](const json& j, std::size_t line) {
    PairedSample s;
    if (!j.contains("frame") || !j["frame"].is_array()) throw SchemaError(line, "missing array 'frame'");
    for (const json& pt : j["frame"]) {
      if (!pt.is_array() || pt.size() != 5) throw SchemaError(line, "each point must be [x, y, z, doppler, intensity]");
      RadarPoint p;
      double* fields[] = {&p.x, &p.y, &p.z, &p.doppler, &p.intensity};
      for (std::size_t i = 0; i < 5; ++i) {
        if (!pt[i].is_number()) throw SchemaError(line, "non-numeric point value");
        *fields[i] = pt[i].get<double>();
      }
      if (!p.valid()) throw SchemaError(line, "point values must be finite with intensity >= 0");
      s.frame.points.push_back(p);
    }
    s.teacher = detail::read_vector(j, "teacher_embedding", line, dim);
    if (j.contains("label") && !j["label"].is_null()) {
      if (!j["label"].is_string()) throw SchemaError(line, "'label' must be a string");
      s.label = j["label"].get<std::string>();
    }
    if (!j.contains("timestamp_ms") || !j["timestamp_ms"].is_number_integer())
      throw SchemaError(line, "missing integer 'timestamp_ms'");
    s.timestamp_ms = j["timestamp_ms"].get<std::int64_t>();
    s.frame.timestamp_ms = s.timestamp_ms;
    return s;
  });
}

inline LoadResult<TextAnchor> load_anchors(const std::filesystem::path& path, std::size_t dim = kEmbeddingDim) {
  auto result = detail::load_jsonl<TextAnchor>(path, [dim](const json& j, std::size_t line) {
    TextAnchor a;
    if (!j.contains("class") || !j["class"].is_string()) throw SchemaError(line, "missing string 'class'");
    a.class_name = j["class"].get<std::string>();
    a.prompt = j.contains("prompt") && j["prompt"].is_string() ? j["prompt"].get<std::string>()
                                                               : default_prompt(a.class_name);
    a.embedding = detail::read_vector(j, "embedding", line, dim);
    return a;
  });
  std::set<std::string> seen;
  for (const TextAnchor& a : result.items)
    if (!seen.insert(a.class_name).second) throw Error(ErrorKind::DuplicateClass, "class '" + a.class_name + "'");
  return result;
}

// --------------------------------------------------------------- config ----

inline json to_json(const EncoderConfig& c) {
  return json{{"points_per_frame", c.points_per_frame}, {"d_out", c.d_out},
              {"stn_hidden", c.stn_hidden},             {"n_attn_layers", c.n_attn_layers},
              {"d_model", c.d_model},                   {"d_k", c.d_k},
              {"phi_hidden", c.phi_hidden},             {"psi_hidden", c.psi_hidden},
              {"dropout_rate", c.dropout_rate},         {"bn_momentum", c.bn_momentum},
              {"bn_eps", c.bn_eps},                     {"attention_residual", c.attention_residual}};
}

inline EncoderConfig encoder_config_from_json(const json& j) {
  EncoderConfig c;
  c.points_per_frame = j.at("points_per_frame").get<int>();
  c.d_out = j.at("d_out").get<int>();
  c.stn_hidden = j.at("stn_hidden").get<std::vector<int>>();
  c.n_attn_layers = j.at("n_attn_layers").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.d_k = j.at("d_k").get<int>();
  c.phi_hidden = j.at("phi_hidden").get<std::vector<int>>();
  c.psi_hidden = j.at("psi_hidden").get<std::vector<int>>();
  c.dropout_rate = j.at("dropout_rate").get<double>();
  c.bn_momentum = j.at("bn_momentum").get<double>();
  c.bn_eps = j.at("bn_eps").get<double>();
  c.attention_residual = j.at("attention_residual").get<bool>();
  c.validate();
  return c;
}

inline json to_json(const PreprocessConfig& p) {
  return json{{"v_thresh", p.v_thresh},
              {"points_per_frame", p.points_per_frame},
              {"intensity_mean", p.intensity.mean},
              {"intensity_std", p.intensity.stddev}};
}

inline PreprocessConfig preprocess_config_from_json(const json& j) {
  PreprocessConfig p;
  p.v_thresh = j.at("v_thresh").get<double>();
  p.points_per_frame = j.at("points_per_frame").get<int>();
  p.intensity.mean = j.at("intensity_mean").get<double>();
  p.intensity.stddev = j.at("intensity_std").get<double>();
  return p;
}

inline json to_json(const EpochRecord& r) {
  json j{{"epoch", r.epoch}};
  j[r.loss_kind == LossKind::CKD ? "ckd_loss" : "mse_loss"] = r.loss;
  if (r.val_zero_shot_acc) j["val_zero_shot_acc"] = *r.val_zero_shot_acc;
  if (r.mean_abs_corr_diff) j["mean_abs_corr_diff"] = *r.mean_abs_corr_diff;
  j["wall_ms"] = r.wall_ms;
  return j;
}

inline json to_json(const ConfusionReport& r) {
  json per_class = json::array();
  for (std::size_t i = 0; i < r.classes.size(); ++i)
    per_class.push_back({{"class", r.classes[i]}, {"precision", r.precision[i]}, {"recall", r.recall[i]}});
  return json{{"accuracy", r.accuracy}, {"n_queries", r.n_queries}, {"per_class", per_class}};
}

/// Row-normalized confusion matrix; the header row names the classes.
inline std::string confusion_csv(const ConfusionReport& r) {
  auto quote = [](const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char ch : s) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
    return q + "\"";
  };
  std::string out = "true\\predicted";
  for (const auto& c : r.classes) out += "," + quote(c);
  out += '\n';
  for (std::size_t t = 0; t < r.classes.size(); ++t) {
    out += quote(r.classes[t]);
    for (double v : r.normalized[t]) out += "," + json(v).dump();
    out += '\n';
  }
  return out;
}

// ----------------------------------------------------------- checkpoint ----

inline constexpr char kCheckpointMagic[8] = {'F', 'M', 'F', 'I', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class S>
struct Checkpoint {
  EncoderParams<S> params;
  PreprocessConfig preprocess;
};

namespace detail {

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <class T>
T take(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw Error(ErrorKind::SchemaError, "checkpoint truncated");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace detail

/// Layout (little-endian): magic, version, scalar width, JSON header
/// (encoder + preprocessing config), then named tensors with shapes and raw
/// row-major data. Learnable tensors first, running statistics after.
template <class S>
std::string serialize_checkpoint(const Checkpoint<S>& ck) {
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  detail::put<std::uint32_t>(out, sizeof(S));
  const std::string header = json{{"encoder", to_json(ck.params.config)}, {"preprocess", to_json(ck.preprocess)}}.dump();
  detail::put<std::uint64_t>(out, header.size());
  out += header;
  auto tensors = ck.params.named_params();
  for (auto& b : ck.params.named_buffers()) tensors.push_back(b);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, m] : tensors) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put<std::int64_t>(out, m->rows());
    detail::put<std::int64_t>(out, m->cols());
    out.append(reinterpret_cast<const char*>(m->data()), static_cast<std::size_t>(m->size()) * sizeof(S));
  }
  return out;
}

template <class S>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<S>& ck) {
  atomic_write(path, serialize_checkpoint(ck));
}

template <class S>
Checkpoint<S> deserialize_checkpoint(const std::string& in) {
  if (in.size() < sizeof(kCheckpointMagic) || std::memcmp(in.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw Error(ErrorKind::SchemaError, "not a checkpoint file");
  std::size_t pos = sizeof(kCheckpointMagic);
  const auto version = detail::take<std::uint32_t>(in, pos);
  if (version != kCheckpointVersion)
    throw Error(ErrorKind::SchemaError, "unsupported checkpoint version " + std::to_string(version));
  const auto width = detail::take<std::uint32_t>(in, pos);
  if (width != sizeof(float) && width != sizeof(double)) throw Error(ErrorKind::SchemaError, "bad scalar width");
  const auto header_len = detail::take<std::uint64_t>(in, pos);
  if (pos + header_len > in.size()) throw Error(ErrorKind::SchemaError, "checkpoint truncated");
  Checkpoint<S> ck;
  try {
    const json header = json::parse(in.substr(pos, header_len));
    ck.params = init_encoder<S>(encoder_config_from_json(header.at("encoder")), 0);
    ck.preprocess = preprocess_config_from_json(header.at("preprocess"));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::SchemaError, std::string("bad checkpoint header: ") + e.what());
  }
  pos += header_len;
  auto tensors = ck.params.named_params();
  for (auto& b : ck.params.named_buffers()) tensors.push_back(b);
  const auto count = detail::take<std::uint32_t>(in, pos);
  if (count != tensors.size()) throw Error(ErrorKind::SchemaError, "checkpoint tensor count mismatch");
  for (auto& [name, m] : tensors) {
    const auto len = detail::take<std::uint32_t>(in, pos);
    if (pos + len > in.size() || in.compare(pos, len, name) != 0)
      throw Error(ErrorKind::SchemaError, "expected tensor '" + name + "'");
    pos += len;
    const auto rows = detail::take<std::int64_t>(in, pos);
    const auto cols = detail::take<std::int64_t>(in, pos);
    if (rows != m->rows() || cols != m->cols()) throw Error(ErrorKind::SchemaError, "shape mismatch for '" + name + "'");
    const std::size_t n = static_cast<std::size_t>(rows * cols);
    if (pos + n * width > in.size()) throw Error(ErrorKind::SchemaError, "checkpoint truncated");
    for (std::size_t i = 0; i < n; ++i) {
      if (width == sizeof(float)) {
        m->data()[i] = static_cast<S>(detail::take<float>(in, pos));
      } else {
        m->data()[i] = static_cast<S>(detail::take<double>(in, pos));
      }
    }
  }
  if (pos != in.size()) throw Error(ErrorKind::SchemaError, "trailing bytes in checkpoint");
  return ck;
}

template <class S>
Checkpoint<S> load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint<S>(read_file(path));
}

}  // namespace fmfi
