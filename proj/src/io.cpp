#include "octloc/io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

static_assert(std::endian::native == std::endian::little,
              "file formats assume a little-endian host");

namespace octloc {

uint32_t crc32(const uint8_t* data, std::size_t n) {
  static const auto table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k)
        c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  uint32_t crc = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < n; ++i)
    crc = table[(crc ^ data[i]) & 0xFFu] ^ (crc >> 8);
  return crc ^ 0xFFFFFFFFu;
}

namespace {

using nlohmann::json;

void append_bytes(std::string& buf, const void* p, std::size_t n) {
  buf.append(static_cast<const char*>(p), n);
}

void append_u32(std::string& buf, uint32_t v) { append_bytes(buf, &v, 4); }
void append_u64(std::string& buf, uint64_t v) { append_bytes(buf, &v, 8); }
void append_f64(std::string& buf, double v) { append_bytes(buf, &v, 8); }

void append_str(std::string& buf, const std::string& s) {
  append_u32(buf, static_cast<uint32_t>(s.size()));
  buf.append(s);
}

class Reader {
 public:
  Reader(std::string data, std::string path)
      : data_(std::move(data)), path_(std::move(path)) {}

  uint32_t u32() { return fixed<uint32_t>(); }
  uint64_t u64() { return fixed<uint64_t>(); }
  double f64() { return fixed<double>(); }

  std::string str() {
    const uint32_t n = u32();
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void magic(const char* expect) {
    need(4);
    if (data_.compare(pos_, 4, expect) != 0)
      throw DataError(path_ + ": bad magic, expected " + expect);
    pos_ += 4;
  }

  std::size_t pos() const { return pos_; }
  std::size_t size() const { return data_.size(); }
  const std::string& data() const { return data_; }
  void expect_end() const {
    if (pos_ != data_.size())
      throw DataError(path_ + ": trailing bytes after payload");
  }

 private:
  template <typename T>
  T fixed() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void need(std::size_t n) const {
    if (pos_ + n > data_.size())
      throw DataError(path_ + ": truncated file");
  }
  std::string data_;
  std::string path_;
  std::size_t pos_ = 0;
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void spill(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed: " + path);
}

json pose_to_json(const Pose& p) {
  return json{{"t", p.t}, {"q", p.q}};
}

Pose pose_from_json(const json& j) {
  Pose p;
  j.at("t").get_to(p.t);
  j.at("q").get_to(p.q);
  validate_pose(p);
  return p;
}

std::string sidecar_path(const std::string& path) {
  return path + ".meta.json";
}

bool file_exists(const std::string& path) {
  return std::ifstream(path).good();
}

std::string hex_code(uint64_t code) {
  std::ostringstream os;
  os << std::hex << code;
  return os.str();
}

}  // namespace

void save_cloud(const std::string& path, const PointCloud& pc) {
  std::string buf;
  buf.reserve(16 + 24 * pc.points.size());
  buf.append("HOPC");
  append_u32(buf, 1);
  append_u64(buf, pc.points.size());
  for (const auto& p : pc.points) {
    append_f64(buf, p.x);
    append_f64(buf, p.y);
    append_f64(buf, p.z);
  }
  spill(path, buf);

  json meta{{"source_id", pc.source_id}, {"pose", pose_to_json(pc.pose)}};
  spill(sidecar_path(path), meta.dump(2) + "\n");
}

PointCloud load_cloud(const std::string& path) {
  Reader r(slurp(path), path);
  r.magic("HOPC");
  const uint32_t version = r.u32();
  if (version != 1)
    throw DataError(path + ": unsupported version " + std::to_string(version));
  const uint64_t count = r.u64();
  PointCloud pc;
  pc.points.resize(count);
  for (auto& p : pc.points) {
    p.x = r.f64();
    p.y = r.f64();
    p.z = r.f64();
  }
  r.expect_end();

  const std::string meta_path = sidecar_path(path);
  if (file_exists(meta_path)) {
    json meta;
    try {
      meta = json::parse(slurp(meta_path));
      pc.source_id = meta.at("source_id").get<std::string>();
      pc.pose = pose_from_json(meta.at("pose"));
    } catch (const json::exception& e) {
      throw DataError(meta_path + ": " + e.what());
    }
  }
  return pc;
}

PointCloud load_cloud_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  PointCloud pc;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    Point3 p;
    char c1 = 0, c2 = 0;
    std::istringstream ls(line);
    if (!(ls >> p.x >> c1 >> p.y >> c2 >> p.z) || c1 != ',' || c2 != ',')
      throw DataError(path + ":" + std::to_string(lineno) +
                      ": expected x,y,z");
    pc.points.push_back(p);
  }
  return pc;
}

void save_octree_dump(const std::string& path, const OctreePyramid& pyr) {
  std::ostringstream os;
  os.precision(10);
  for (const auto& level : pyr.levels) {
    for (std::size_t i = 0; i < level.keys.size(); ++i) {
      const auto& s = level.stats[i];
      os << "depth " << level.depth << " code " << hex_code(level.keys[i])
         << " count " << s.count << " centroid " << s.centroid[0] << " "
         << s.centroid[1] << " " << s.centroid[2] << "\n";
    }
  }
  spill(path, os.str());
}

void save_window_dump(const std::string& path, const OctreeLevel& level,
                      const WindowPartition& part) {
  if (part.count != level.keys.size())
    throw ShapeError("window dump: partition does not match level");
  std::ostringstream os;
  os.precision(10);
  for (std::size_t i = 0; i < level.keys.size(); ++i) {
    const auto& s = level.stats[i];
    os << "window " << (i / part.window_size) << " code "
       << hex_code(level.keys[i]) << " centroid " << s.centroid[0] << " "
       << s.centroid[1] << " " << s.centroid[2] << "\n";
  }
  spill(path, os.str());
}

void save_attention_dumps(const std::string& prefix,
                          const std::vector<AttnRecord>& records) {
  for (const auto& rec : records) {
    std::string label = rec.label;
    for (auto& c : label)
      if (c == '/') c = '_';
    std::ostringstream os;
    os.precision(10);
    os << "head,row,col,value\n";
    const auto& cap = rec.capture;
    const std::size_t t = cap.tokens;
    for (std::size_t b = 0; b < cap.batch; ++b)
      for (std::size_t h = 0; h < cap.heads; ++h)
        for (std::size_t i = 0; i < t; ++i)
          for (std::size_t j = 0; j < t; ++j)
            os << h << "," << (b * t + i) << "," << j << ","
               << cap.attn[((b * cap.heads + h) * t + i) * t + j] << "\n";
    spill(prefix + label + ".csv", os.str());
  }
}

void save_descriptors(const std::string& path,
                      const std::vector<DescriptorRecord>& records) {
  if (records.empty()) throw DataError("refusing to write empty " + path);
  const std::size_t dim = records.front().descriptor.size();
  std::string buf;
  buf.append("HODC");
  append_u32(buf, 1);
  append_u32(buf, static_cast<uint32_t>(dim));
  append_u64(buf, records.size());
  json meta = json::array();
  for (const auto& r : records) {
    if (r.descriptor.size() != dim)
      throw ShapeError("descriptor dimension mismatch in record " +
                       std::to_string(r.id));
    append_u64(buf, r.id);
    for (double v : r.descriptor) append_f64(buf, v);
    meta.push_back({{"id", r.id},
                    {"source_id", r.source_id},
                    {"pose", pose_to_json(r.pose)}});
  }
  spill(path, buf);
  spill(sidecar_path(path), meta.dump(2) + "\n");
}

std::vector<DescriptorRecord> load_descriptors(const std::string& path) {
  Reader r(slurp(path), path);
  r.magic("HODC");
  const uint32_t version = r.u32();
  if (version != 1)
    throw DataError(path + ": unsupported version " + std::to_string(version));
  const uint32_t dim = r.u32();
  const uint64_t count = r.u64();
  std::vector<DescriptorRecord> records(count);
  for (auto& rec : records) {
    rec.id = r.u64();
    rec.descriptor.resize(dim);
    for (auto& v : rec.descriptor) v = r.f64();
  }
  r.expect_end();

  const std::string meta_path = sidecar_path(path);
  if (file_exists(meta_path)) {
    try {
      json meta = json::parse(slurp(meta_path));
      if (meta.size() != records.size())
        throw DataError(meta_path + ": record count mismatch");
      for (std::size_t i = 0; i < records.size(); ++i) {
        if (meta[i].at("id").get<uint64_t>() != records[i].id)
          throw DataError(meta_path + ": id mismatch at record " +
                          std::to_string(i));
        records[i].source_id = meta[i].at("source_id").get<std::string>();
        records[i].pose = pose_from_json(meta[i].at("pose"));
      }
    } catch (const json::exception& e) {
      throw DataError(meta_path + ": " + e.what());
    }
  }
  return records;
}

void save_weights(const std::string& path, const std::string& config_json,
                  const ModelParams& params) {
  std::string buf;
  buf.append("HOWT");
  append_u32(buf, 1);
  append_str(buf, config_json);
  append_u32(buf, static_cast<uint32_t>(params.tensors.size()));
  for (const auto& [name, t] : params.tensors) {
    append_str(buf, name);
    append_u32(buf, static_cast<uint32_t>(t.shape().size()));
    for (std::size_t d : t.shape())
      append_u64(buf, static_cast<uint64_t>(d));
    for (double v : t.values()) append_f64(buf, v);
  }
  append_u32(buf, crc32(reinterpret_cast<const uint8_t*>(buf.data()),
                        buf.size()));
  spill(path, buf);
}

LoadedWeights load_weights(const std::string& path) {
  Reader r(slurp(path), path);
  if (r.size() < 8) throw DataError(path + ": truncated file");
  const std::size_t body = r.size() - 4;
  uint32_t stored;
  std::memcpy(&stored, r.data().data() + body, 4);
  const uint32_t actual =
      crc32(reinterpret_cast<const uint8_t*>(r.data().data()), body);
  if (stored != actual)
    throw IntegrityError(path + ": CRC mismatch, file is corrupt");

  r.magic("HOWT");
  const uint32_t version = r.u32();
  if (version != 1)
    throw DataError(path + ": unsupported version " + std::to_string(version));
  LoadedWeights w;
  w.config_json = r.str();
  const uint32_t count = r.u32();
  for (uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const uint32_t rank = r.u32();
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.u64());
    std::vector<double> data(shape_numel(shape));
    for (auto& v : data) v = r.f64();
    w.tensors.emplace_back(name,
                           Tensor::param(shape, std::move(data), name));
  }
  if (r.pos() != body) throw DataError(path + ": trailing bytes after payload");
  return w;
}

ModelParams params_from_weights(const LoadedWeights& w,
                                const ModelConfig& cfg) {
  ModelParams params = ModelParams::init(cfg, 0);
  std::size_t matched = 0;
  for (const auto& [name, tensor] : w.tensors) {
    auto it = params.tensors.find(name);
    if (it == params.tensors.end())
      throw DataError("weight file has unknown tensor: " + name);
    if (it->second.shape() != tensor.shape())
      throw DataError("shape mismatch for tensor " + name + ": expected " +
                      shape_str(it->second.shape()) + ", file has " +
                      shape_str(tensor.shape()));
    it->second.values() = tensor.values();
    ++matched;
  }
  if (matched != params.tensors.size()) {
    for (const auto& [name, t] : params.tensors) {
      const bool found =
          std::any_of(w.tensors.begin(), w.tensors.end(),
                      [&name](const auto& p) { return p.first == name; });
      if (!found) throw DataError("weight file is missing tensor: " + name);
    }
  }
  return params;
}

}  // namespace octloc
