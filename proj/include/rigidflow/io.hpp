#pragma once

// Binary dataset and checkpoint files, JSON reports and plain-text tables.
//
// File layout (little-endian): 4-byte magic, u32 version, u64 header length,
// JSON header, then raw payload arrays in the order the header lists them.

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <fcntl.h>
#include <unistd.h>

#include "rigidflow/error.hpp"
#include "rigidflow/networks.hpp"
#include "rigidflow/scenegen.hpp"
#include "rigidflow/training.hpp"

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

namespace rigidflow {

inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr char kDatasetMagic[4] = {'R', 'F', 'D', 'S'};
inline constexpr char kCheckpointMagic[4] = {'R', 'F', 'C', 'K'};

namespace fs = std::filesystem;

/// Writes `bytes` to a sibling temp file and renames it over `path`.
inline void write_atomic(const fs::path& path, const std::string& bytes) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::Io, "cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw Error(ErrorKind::Io, "write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    throw Error(ErrorKind::Io, "cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
  }
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// Framed container.

namespace detail {

template <typename T>
void append_pod(std::string& out, const T& v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void append_array(std::string& out, const std::vector<T>& v) {
  out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(T));
}

inline std::string frame(const char (&magic)[4], const nlohmann::json& header, const std::string& payload) {
  const std::string h = header.dump();
  std::string out(magic, 4);
  append_pod(out, kFormatVersion);
  append_pod(out, static_cast<std::uint64_t>(h.size()));
  out += h;
  out += payload;
  return out;
}

struct Unframed {
  nlohmann::json header;
  std::string payload;
};

inline Unframed unframe(const std::string& bytes, const char (&magic)[4], const std::string& what) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), magic, 4) != 0)
    throw Error(ErrorKind::Dataset, what + ": bad magic");
  std::uint32_t version;
  std::uint64_t len;
  std::memcpy(&version, bytes.data() + 4, 4);
  std::memcpy(&len, bytes.data() + 8, 8);
  if (version != kFormatVersion)
    throw Error(ErrorKind::Dataset, what + ": unsupported version " + std::to_string(version));
  if (len > bytes.size() - 16) throw Error(ErrorKind::Dataset, what + ": truncated header");
  Unframed u;
  try {
    u.header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(len));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Dataset, what + ": malformed header: " + e.what());
  }
  u.payload = bytes.substr(16 + len);
  return u;
}

class PayloadReader {
 public:
  PayloadReader(const std::string& p, std::string what) : p_(p), what_(std::move(what)) {}

  template <typename T>
  std::vector<T> take(std::size_t count) {
    const std::size_t bytes = count * sizeof(T);
    if (bytes > p_.size() - pos_) throw Error(ErrorKind::Dataset, what_ + ": payload shorter than declared shapes");
    std::vector<T> v(count);
    std::memcpy(v.data(), p_.data() + pos_, bytes);
    pos_ += bytes;
    return v;
  }

  void finish() const {
    if (pos_ != p_.size()) throw Error(ErrorKind::Dataset, what_ + ": payload longer than declared shapes");
  }

 private:
  const std::string& p_;
  std::size_t pos_ = 0;
  std::string what_;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Datasets.

inline std::string encode_dataset(const TrajectoryDataset& ds) {
  ds.validate();
  nlohmann::json h;
  h["kind"] = "trajectory_dataset";
  h["frames"] = ds.frames();
  h["particles"] = ds.particles;
  h["has_orientations"] = ds.has_orientations();
  h["bbox"] = ds.bbox;
  h["seed"] = ds.seed;
  h["canonical_frame"] = ds.canonical_frame;
  h["config"] = ds.config.empty() ? nlohmann::json() : nlohmann::json::parse(ds.config);
  h["payload"] = {"timestamps f64[frames]", "positions f64[frames][particles][3]",
                  "orientations f64[frames][particles][4] (optional)", "labels i32[particles]"};
  std::string payload;
  detail::append_array(payload, ds.timestamps);
  detail::append_array(payload, ds.positions);
  detail::append_array(payload, ds.orientations);
  detail::append_array(payload, ds.labels);
  return detail::frame(kDatasetMagic, h, payload);
}

inline TrajectoryDataset decode_dataset(const std::string& bytes) {
  const auto u = detail::unframe(bytes, kDatasetMagic, "dataset");
  TrajectoryDataset ds;
  try {
    const auto& h = u.header;
    const int frames = h.at("frames").get<int>();
    ds.particles = h.at("particles").get<int>();
    if (frames < 0 || ds.particles < 0) throw Error(ErrorKind::Dataset, "dataset: negative shape");
    from_json(h.at("bbox"), ds.bbox);
    ds.seed = h.at("seed").get<std::uint64_t>();
    ds.canonical_frame = h.at("canonical_frame").get<int>();
    ds.config = h.at("config").is_null() ? "" : h.at("config").dump();
    detail::PayloadReader r(u.payload, "dataset");
    const auto F = static_cast<std::size_t>(frames), N = static_cast<std::size_t>(ds.particles);
    ds.timestamps = r.take<double>(F);
    ds.positions = r.take<double>(F * N * 3);
    if (h.at("has_orientations").get<bool>()) ds.orientations = r.take<double>(F * N * 4);
    ds.labels = r.take<std::int32_t>(N);
    r.finish();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Dataset, std::string("dataset: bad header field: ") + e.what());
  }
  ds.validate();
  return ds;
}

inline void save_dataset(const fs::path& path, const TrajectoryDataset& ds) { write_atomic(path, encode_dataset(ds)); }
inline TrajectoryDataset load_dataset(const fs::path& path) { return decode_dataset(read_file(path)); }

// ---------------------------------------------------------------------------
// Configurations as JSON.

inline void to_json(nlohmann::json& j, const AblationFlags& a) {
  j = nlohmann::json::object();
  for (const char* name : kAblationNames) j[name] = *ablation_flag(const_cast<AblationFlags&>(a), name);
}

inline void from_json(const nlohmann::json& j, AblationFlags& a) {
  for (const auto& [k, v] : j.items()) {
    bool* f = ablation_flag(a, k);
    if (!f) throw Error(ErrorKind::Config, "unknown ablation flag '" + k + "'");
    *f = v.get<bool>();
  }
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"code_dim", c.code_dim},         {"bottleneck", c.bottleneck},       {"encoding_degree", c.encoding_degree},
       {"code_width", c.code_width},     {"code_layers", c.code_layers},     {"neck_multiplier", c.neck_multiplier},
       {"weight_width", c.weight_width}, {"weight_layers", c.weight_layers}, {"weight_skip", c.weight_skip},
       {"deform_width", c.deform_width}, {"deform_layers", c.deform_layers}, {"deform_skip", c.deform_skip},
       {"ablation", c.ablation},         {"particle_count", c.particle_count}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("code_dim").get_to(c.code_dim);
  j.at("bottleneck").get_to(c.bottleneck);
  j.at("encoding_degree").get_to(c.encoding_degree);
  j.at("code_width").get_to(c.code_width);
  j.at("code_layers").get_to(c.code_layers);
  j.at("neck_multiplier").get_to(c.neck_multiplier);
  j.at("weight_width").get_to(c.weight_width);
  j.at("weight_layers").get_to(c.weight_layers);
  j.at("weight_skip").get_to(c.weight_skip);
  j.at("deform_width").get_to(c.deform_width);
  j.at("deform_layers").get_to(c.deform_layers);
  j.at("deform_skip").get_to(c.deform_skip);
  j.at("ablation").get_to(c.ablation);
  j.at("particle_count").get_to(c.particle_count);
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"dt", c.dt},
       {"learning_rate", c.learning_rate},
       {"decay_at", c.decay_at},
       {"decay_factor", c.decay_factor},
       {"iterations", c.iterations},
       {"batch_timestamps", c.batch_timestamps},
       {"lambda_deform", c.lambda_deform},
       {"lambda_vel", c.lambda_vel},
       {"lambda_rotation", c.lambda_rotation},
       {"seed", c.seed},
       {"deterministic", c.deterministic},
       {"model", c.model}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  j.at("dt").get_to(c.dt);
  j.at("learning_rate").get_to(c.learning_rate);
  j.at("decay_at").get_to(c.decay_at);
  j.at("decay_factor").get_to(c.decay_factor);
  j.at("iterations").get_to(c.iterations);
  j.at("batch_timestamps").get_to(c.batch_timestamps);
  j.at("lambda_deform").get_to(c.lambda_deform);
  j.at("lambda_vel").get_to(c.lambda_vel);
  j.at("lambda_rotation").get_to(c.lambda_rotation);
  j.at("seed").get_to(c.seed);
  j.at("deterministic").get_to(c.deterministic);
  j.at("model").get_to(c.model);
}

// ---------------------------------------------------------------------------
// Checkpoints.

struct Checkpoint {
  Model model;
  TrainConfig train;
  double span_end = 1.0;   // last training timestamp
  Matrix canonical;        // frame-0 positions, model frame
  std::vector<std::int32_t> labels;
  BoundingBox bbox;
};

inline std::string encode_checkpoint(const Checkpoint& ck) {
  nlohmann::json h;
  h["kind"] = "checkpoint";
  h["model"] = ck.model.config();
  h["train"] = ck.train;
  nlohmann::json center;
  to_json(center, ck.model.normalization.center);
  h["normalization"] = {{"center", center}, {"scale", ck.model.normalization.scale}};
  h["span_end"] = ck.span_end;
  h["bbox"] = ck.bbox;
  h["param_count"] = ck.model.params().size();
  h["particles"] = ck.canonical.cols();
  h["payload"] = {"params f64[param_count]", "canonical f64[particles][3]", "labels i32[particles]"};
  std::string payload;
  payload.append(reinterpret_cast<const char*>(ck.model.params().data()),
                 static_cast<std::size_t>(ck.model.params().size()) * sizeof(double));
  payload.append(reinterpret_cast<const char*>(ck.canonical.data()),
                 static_cast<std::size_t>(ck.canonical.size()) * sizeof(double));
  if (!ck.labels.empty() && ck.labels.size() != static_cast<std::size_t>(ck.canonical.cols()))
    throw Error(ErrorKind::InvalidInput, "checkpoint label count mismatch");
  std::vector<std::int32_t> labels = ck.labels;
  labels.resize(static_cast<std::size_t>(ck.canonical.cols()), -1);
  detail::append_array(payload, labels);
  return detail::frame(kCheckpointMagic, h, payload);
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  const auto u = detail::unframe(bytes, kCheckpointMagic, "checkpoint");
  Checkpoint ck;
  try {
    const auto& h = u.header;
    ck.model = Model(h.at("model").get<ModelConfig>());
    ck.train = h.at("train").get<TrainConfig>();
    from_json(h.at("normalization").at("center"), ck.model.normalization.center);
    ck.model.normalization.scale = h.at("normalization").at("scale").get<double>();
    ck.span_end = h.at("span_end").get<double>();
    from_json(h.at("bbox"), ck.bbox);
    const auto count = h.at("param_count").get<std::size_t>();
    if (count != static_cast<std::size_t>(ck.model.params().size()))
      throw Error(ErrorKind::Dataset, "checkpoint: parameter count does not match the model configuration");
    const auto n = h.at("particles").get<std::size_t>();
    detail::PayloadReader r(u.payload, "checkpoint");
    const auto params = r.take<double>(count);
    std::memcpy(ck.model.params().data(), params.data(), count * sizeof(double));
    const auto canon = r.take<double>(3 * n);
    ck.canonical = Eigen::Map<const Matrix>(canon.data(), 3, static_cast<Eigen::Index>(n));
    ck.labels = r.take<std::int32_t>(n);
    r.finish();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Dataset, std::string("checkpoint: bad header field: ") + e.what());
  }
  return ck;
}

inline void save_checkpoint(const fs::path& path, const Checkpoint& ck) { write_atomic(path, encode_checkpoint(ck)); }
inline Checkpoint load_checkpoint(const fs::path& path) { return decode_checkpoint(read_file(path)); }

/// Checkpoint for a freshly trained model on `train_set`.
inline Checkpoint make_checkpoint(Model model, const TrainConfig& cfg, const TrajectoryDataset& train_set) {
  Checkpoint ck;
  ck.canonical = model.normalization.to_model(Matrix(train_set.frame(0)));
  ck.model = std::move(model);
  ck.train = cfg;
  ck.span_end = train_set.timestamps.back();
  ck.labels = train_set.labels;
  ck.bbox = train_set.bbox;
  return ck;
}

// ---------------------------------------------------------------------------
// Run directory lock.

/// Exclusive lock file inside a run directory; removed on destruction.
class RunLock {
 public:
  explicit RunLock(const fs::path& dir) : path_(dir / ".lock") {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw Error(ErrorKind::Io, "cannot create " + dir.string() + ": " + ec.message());
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) throw Error(ErrorKind::Io, "run directory " + dir.string() + " is locked by another process");
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] const auto w = ::write(fd, pid.data(), pid.size());
    ::close(fd);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }

 private:
  fs::path path_;
};

// ---------------------------------------------------------------------------
// Text output.

inline std::string fixed3(double v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(3) << v;
  return s.str();
}

/// Whitespace-aligned table, numbers to 3 decimals.
class TextTable {
 public:
  explicit TextTable(std::vector<std::string> header) : rows_{std::move(header)} {}

  void add(std::vector<std::string> row) { rows_.push_back(std::move(row)); }

  std::string str() const {
    std::vector<std::size_t> w;
    for (const auto& r : rows_)
      for (std::size_t c = 0; c < r.size(); ++c) {
        if (w.size() <= c) w.push_back(0);
        w[c] = std::max(w[c], r[c].size());
      }
    std::ostringstream s;
    for (const auto& r : rows_) {
      for (std::size_t c = 0; c < r.size(); ++c) {
        if (c) s << "  ";
        s << std::setw(static_cast<int>(w[c])) << r[c];
      }
      s << '\n';
    }
    return s.str();
  }

 private:
  std::vector<std::vector<std::string>> rows_;
};

struct TrajectoryErrors {
  std::vector<double> per_frame;  // RMSE per frame
  double overall = 0.0;
  double final_frame = 0.0;
  double percent_of_diagonal = 0.0;
};

/// Per-frame and overall RMSE of predicted against reference positions.
inline TrajectoryErrors compare_trajectories(const TrajectoryDataset& pred, const TrajectoryDataset& gt) {
  if (pred.frames() != gt.frames() || pred.particles != gt.particles)
    throw Error(ErrorKind::InvalidInput, "prediction and reference shapes differ");
  TrajectoryErrors e;
  double total = 0.0;
  for (int f = 0; f < gt.frames(); ++f) {
    const double sq = (pred.frame(f) - gt.frame(f)).squaredNorm();
    total += sq;
    e.per_frame.push_back(gt.particles ? std::sqrt(sq / gt.particles) : 0.0);
  }
  const double count = static_cast<double>(gt.frames()) * gt.particles;
  e.overall = count > 0 ? std::sqrt(total / count) : 0.0;
  e.final_frame = e.per_frame.empty() ? 0.0 : e.per_frame.back();
  const double diag = gt.bbox.diagonal();
  e.percent_of_diagonal = diag > 0 ? 100.0 * e.overall / diag : 0.0;
  return e;
}

/// Predicted trajectories in scene coordinates at `times`, in the dataset layout.
inline TrajectoryDataset predict_dataset(const Checkpoint& ck, std::span<const double> times) {
  const std::vector<Matrix> pred = predict_positions(ck.model, ck.canonical, times, ck.train.dt, ck.span_end);
  TrajectoryDataset out;
  out.timestamps.assign(times.begin(), times.end());
  out.particles = static_cast<int>(ck.canonical.cols());
  out.positions.resize(times.size() * static_cast<std::size_t>(out.particles) * 3);
  for (std::size_t f = 0; f < times.size(); ++f) out.frame(static_cast<int>(f)) = ck.model.normalization.to_world(pred[f]);
  out.labels = ck.labels;
  out.bbox = ck.bbox;
  return out;
}

}  // namespace rigidflow
