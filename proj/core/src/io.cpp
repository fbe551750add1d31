#include "dive/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>

#include "dive/error.hpp"

namespace dive {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace {

class Writer {
 public:
  template <class T>
  void put(T v) {
    char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    buf_.append(b, sizeof(T));
  }
  void put_bytes(const char* p, std::size_t n) { buf_.append(p, n); }
  void put_string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    buf_.append(s);
  }
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}
  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string get_string() { return get_bytes(get<std::uint32_t>()); }
  bool at_end() const { return pos_ == data_.size(); }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) {
      throw Error(ErrorCode::kTruncated, "truncated: need " + std::to_string(n) + " bytes at offset " +
                                             std::to_string(pos_) + " of " + std::to_string(data_.size()));
    }
  }
  std::string data_;
  std::size_t pos_ = 0;
};

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kIo, "write failed for " + path.string());
}

void expect_magic(Reader& r, const char* magic) {
  const std::string m = r.get_bytes(4);
  if (m != magic) throw Error(ErrorCode::kBadMagic, std::string("bad magic: expected ") + magic);
}

void expect_version(Reader& r, std::uint32_t version) {
  const auto v = r.get<std::uint32_t>();
  if (v != version) {
    throw Error(ErrorCode::kBadVersion,
                "bad version " + std::to_string(v) + " (supported: " + std::to_string(version) + ")");
  }
}

void put_box(Writer& w, const Box2D& b) {
  w.put(b.x);
  w.put(b.y);
  w.put(b.w);
  w.put(b.h);
  w.put<std::uint8_t>(b.visible ? 1 : 0);
}

Box2D get_box(Reader& r) {
  Box2D b;
  b.x = r.get<double>();
  b.y = r.get<double>();
  b.w = r.get<double>();
  b.h = r.get<double>();
  b.visible = r.get<std::uint8_t>() != 0;
  return b;
}

void put_scene(Writer& w, const SceneSpec& s) {
  w.put<std::int32_t>(s.label);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(s.frames));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(s.cameras.size()));
  for (const CameraSpec& c : s.cameras) {
    for (double v : c.intrinsics) w.put(v);
    for (double v : c.rotation) w.put(v);
    for (double v : c.translation) w.put(v);
  }
  const RoadSpec& rd = s.road;
  for (double v : {rd.offset, rd.slope, rd.curve, rd.half_width, rd.cross_z, rd.cross_half_width}) w.put(v);
  w.put<std::uint8_t>(rd.has_cross ? 1 : 0);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(s.instances.size()));
  for (const InstanceSpec& in : s.instances) {
    for (double v : {in.x, in.z, in.length, in.width, in.height, in.angle, in.vx, in.vz}) w.put(v);
    w.put<std::int32_t>(in.caption_id);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(in.boxes.size()));
    for (const Box2D& b : in.boxes) put_box(w, b);
  }
}

SceneSpec get_scene(Reader& r) {
  SceneSpec s;
  s.label = r.get<std::int32_t>();
  s.frames = r.get<std::uint32_t>();
  const auto ncam = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < ncam; ++i) {
    CameraSpec c;
    for (double& v : c.intrinsics) v = r.get<double>();
    for (double& v : c.rotation) v = r.get<double>();
    for (double& v : c.translation) v = r.get<double>();
    s.cameras.push_back(c);
  }
  RoadSpec& rd = s.road;
  for (double* v : {&rd.offset, &rd.slope, &rd.curve, &rd.half_width, &rd.cross_z, &rd.cross_half_width}) {
    *v = r.get<double>();
  }
  rd.has_cross = r.get<std::uint8_t>() != 0;
  const auto nins = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < nins; ++i) {
    InstanceSpec in;
    for (double* v : {&in.x, &in.z, &in.length, &in.width, &in.height, &in.angle, &in.vx, &in.vz}) {
      *v = r.get<double>();
    }
    in.caption_id = r.get<std::int32_t>();
    const auto nb = r.get<std::uint32_t>();
    if (nb != ncam * s.frames) throw Error(ErrorCode::kInvalidArgument, "instance box count does not match views x frames");
    for (std::uint32_t b = 0; b < nb; ++b) in.boxes.push_back(get_box(r));
    s.instances.push_back(std::move(in));
  }
  return s;
}

void put_params(Writer& w, const ParamList& params) {
  w.put<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
  for (const Parameter* p : params) {
    w.put_string(p->name);
    const Shape& sh = p->value.shape();
    w.put<std::uint32_t>(static_cast<std::uint32_t>(sh.size()));
    for (std::size_t d : sh) w.put<std::uint64_t>(d);
    for (std::size_t i = 0; i < p->value.size(); ++i) w.put(p->value[i]);
  }
}

void get_params(Reader& r, const ParamList& params) {
  std::map<std::string, Parameter*> by_name;
  for (Parameter* p : params) by_name[p->name] = p;
  const auto n = r.get<std::uint32_t>();
  std::size_t matched = 0;
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::string name = r.get_string();
    const auto rank = r.get<std::uint32_t>();
    Shape shape(rank);
    for (std::size_t& d : shape) d = r.get<std::uint64_t>();
    auto it = by_name.find(name);
    if (it == by_name.end()) throw Error(ErrorCode::kInvalidArgument, "checkpoint has unknown parameter " + name);
    if (it->second->value.shape() != shape) {
      throw Error(ErrorCode::kShapeMismatch, "parameter " + name + ": stored " + shape_string(shape) + " vs model " +
                                                 shape_string(it->second->value.shape()));
    }
    for (std::size_t j = 0; j < shape_numel(shape); ++j) it->second->value[j] = r.get<double>();
    ++matched;
  }
  if (matched != params.size()) {
    throw Error(ErrorCode::kInvalidArgument, "checkpoint covers " + std::to_string(matched) + " of " +
                                                 std::to_string(params.size()) + " parameters");
  }
}

void put_config(Writer& w, const BackboneConfig& c) {
  for (std::size_t v : {c.channels, c.d_model, c.n_heads, c.n_blocks, c.sketch_cells, c.patch, c.max_frames,
                        c.mlp_ratio, c.conditions.text_tokens, c.conditions.labels, c.conditions.captions}) {
    w.put<std::uint64_t>(v);
  }
  w.put<std::int32_t>(c.noise_bands);
  w.put<std::int32_t>(c.conditions.bands);
}

BackboneConfig get_config(Reader& r) {
  BackboneConfig c;
  for (std::size_t* v : {&c.channels, &c.d_model, &c.n_heads, &c.n_blocks, &c.sketch_cells, &c.patch, &c.max_frames,
                         &c.mlp_ratio, &c.conditions.text_tokens, &c.conditions.labels, &c.conditions.captions}) {
    *v = r.get<std::uint64_t>();
  }
  c.noise_bands = r.get<std::int32_t>();
  c.conditions.bands = r.get<std::int32_t>();
  c.conditions.d_model = c.d_model;
  c.validate();
  return c;
}

std::string csv_field(const std::string& v) {
  if (v.find_first_of(",\"\n") == std::string::npos) return v;
  std::string out = "\"";
  for (char c : v) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

std::vector<std::string> csv_split(const std::string& line) {
  std::vector<std::string> f(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        f.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        f.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      f.emplace_back();
    } else {
      f.back() += c;
    }
  }
  return f;
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

void round_to_f32(LatentGrid& x) {
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<double>(static_cast<float>(x[i]));
}

void dataset_write(const std::filesystem::path& path, const std::vector<DatasetRecord>& records) {
  Writer w;
  w.put_bytes("DIVK", 4);
  w.put<std::uint32_t>(kDatasetVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(records.size()));
  Shape dims{0, 0, 0, 0, 0};
  if (!records.empty()) dims = records.front().video.tensor().shape();
  for (std::size_t d : dims) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
  for (const DatasetRecord& rec : records) {
    if (rec.video.tensor().shape() != dims) throw Error(ErrorCode::kShapeMismatch, "dataset records differ in shape");
    put_scene(w, rec.scene);
    for (std::size_t i = 0; i < rec.video.size(); ++i) w.put(static_cast<float>(rec.video[i]));
  }
  spit(path, w.bytes());
}

std::vector<DatasetRecord> dataset_read(const std::filesystem::path& path) {
  Reader r(slurp(path));
  expect_magic(r, "DIVK");
  expect_version(r, kDatasetVersion);
  const auto count = r.get<std::uint32_t>();
  Shape dims(5);
  for (std::size_t& d : dims) d = r.get<std::uint32_t>();
  std::vector<DatasetRecord> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    DatasetRecord rec;
    rec.scene = get_scene(r);
    rec.video = LatentGrid(dims[0], dims[1], dims[2], dims[3], dims[4]);
    for (std::size_t j = 0; j < rec.video.size(); ++j) rec.video[j] = static_cast<double>(r.get<float>());
    out.push_back(std::move(rec));
  }
  if (!r.at_end()) throw Error(ErrorCode::kInvalidArgument, "trailing bytes after dataset records");
  return out;
}

void checkpoint_write(const std::filesystem::path& path, ModelParams& model, BranchParams* branches) {
  Writer w;
  w.put_bytes("DIVM", 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  put_config(w, model.config);
  put_params(w, model.parameters());
  if (branches) {
    w.put_bytes("MADB", 4);
    w.put<std::uint32_t>(kCheckpointVersion);
    put_params(w, branches->parameters());
  }
  spit(path, w.bytes());
}

Checkpoint checkpoint_read(const std::filesystem::path& path) {
  Reader r(slurp(path));
  expect_magic(r, "DIVM");
  expect_version(r, kCheckpointVersion);
  const BackboneConfig config = get_config(r);
  Checkpoint ck{ModelParams::create(config, 0), std::nullopt};
  get_params(r, ck.model.parameters());
  if (!r.at_end()) {
    expect_magic(r, "MADB");
    expect_version(r, kCheckpointVersion);
    ck.branches = BranchParams::create(config, 0);
    get_params(r, ck.branches->parameters());
    if (!r.at_end()) throw Error(ErrorCode::kInvalidArgument, "trailing bytes after MADB section");
  }
  return ck;
}

std::vector<std::filesystem::path> export_frames(const LatentGrid& x, const std::filesystem::path& dir, double lo,
                                                 double hi) {
  if (x.channels() < 3) throw Error(ErrorCode::kInvalidArgument, "export needs at least 3 channels");
  if (!(hi > lo)) throw Error(ErrorCode::kInvalidArgument, "export range must have hi > lo");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  std::vector<std::filesystem::path> paths;
  for (std::size_t v = 0; v < x.views(); ++v) {
    for (std::size_t t = 0; t < x.frames(); ++t) {
      std::string bytes = "P6\n" + std::to_string(x.width()) + " " + std::to_string(x.height()) + "\n255\n";
      for (std::size_t y = 0; y < x.height(); ++y) {
        for (std::size_t xx = 0; xx < x.width(); ++xx) {
          for (std::size_t c = 0; c < 3; ++c) {
            const double u = std::clamp((x.at(v, t, y, xx, c) - lo) / (hi - lo) * 255.0, 0.0, 255.0);
            bytes.push_back(static_cast<char>(static_cast<std::uint8_t>(std::lround(u))));
          }
        }
      }
      const auto p = dir / ("view" + std::to_string(v) + "_frame" + std::to_string(t) + ".ppm");
      spit(p, bytes);
      paths.push_back(p);
    }
  }
  return paths;
}

PpmImage read_ppm(const std::filesystem::path& path) {
  const std::string data = slurp(path);
  std::istringstream in(data);
  std::string magic;
  PpmImage img;
  in >> magic >> img.width >> img.height >> img.max_value;
  if (magic != "P6") throw Error(ErrorCode::kBadMagic, "not a binary PPM: " + path.string());
  if (!in || img.max_value != 255) throw Error(ErrorCode::kInvalidArgument, "unsupported PPM header in " + path.string());
  in.get();
  const std::size_t n = img.width * img.height * 3;
  const auto off = static_cast<std::size_t>(in.tellg());
  if (data.size() - off < n) throw Error(ErrorCode::kTruncated, "truncated PPM payload in " + path.string());
  img.pixels.assign(data.begin() + static_cast<std::ptrdiff_t>(off), data.begin() + static_cast<std::ptrdiff_t>(off + n));
  return img;
}

const std::vector<std::string>& metrics_columns() {
  static const std::vector<std::string> cols{"schema",      "config_hash", "run",       "guidance",
                                             "schedule",    "steps",       "nfe",       "token_steps",
                                             "wall_ms",     "speedup",     "sample_mse", "distill_error"};
  return cols;
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows, bool append) {
  const bool header = !append || !std::filesystem::exists(path);
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  if (header) {
    const auto& cols = metrics_columns();
    for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
    out << '\n';
  }
  for (const MetricsRow& r : rows) {
    out << kMetricsSchemaVersion << ',' << csv_field(r.config_hash) << ',' << csv_field(r.run) << ','
        << csv_field(r.guidance) << ',' << csv_field(r.schedule) << ',' << r.steps << ',' << r.nfe << ','
        << r.token_steps << ',' << fmt_double(r.wall_ms) << ','
        << fmt_double(r.speedup) << ',' << fmt_double(r.sample_mse) << ',' << fmt_double(r.distill_error) << '\n';
  }
  if (!out) throw Error(ErrorCode::kIo, "write failed for " + path.string());
}

std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path) {
  std::istringstream in(slurp(path));
  std::string line;
  std::getline(in, line);
  std::string expected;
  for (const std::string& c : metrics_columns()) expected += (expected.empty() ? "" : ",") + c;
  if (line != expected) throw Error(ErrorCode::kBadVersion, "unexpected metrics header: " + line);
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::vector<std::string> f = csv_split(line);
    if (f.size() != metrics_columns().size()) throw Error(ErrorCode::kInvalidArgument, "bad metrics row: " + line);
    if (std::stoi(f[0]) != kMetricsSchemaVersion) throw Error(ErrorCode::kBadVersion, "metrics schema " + f[0]);
    MetricsRow r;
    r.config_hash = f[1];
    r.run = f[2];
    r.guidance = f[3];
    r.schedule = f[4];
    r.steps = std::stoul(f[5]);
    r.nfe = std::stoul(f[6]);
    r.token_steps = std::stoul(f[7]);
    r.wall_ms = std::stod(f[8]);
    r.speedup = std::stod(f[9]);
    r.sample_mse = std::stod(f[10]);
    r.distill_error = std::stod(f[11]);
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace dive
