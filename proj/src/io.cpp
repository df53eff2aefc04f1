#include "voxfuse/io.hpp"

#include "voxfuse/error.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace vf {

namespace {

class Writer {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const char*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void f64s(std::span<const double> v) {
    for (double x : v) f64(x);
  }
  void save(const fs::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    if (!out) throw IoError("failed writing " + path.string());
  }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  explicit Reader(const fs::path& path) : path_(path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    buf_.assign(std::istreambuf_iterator<char>(in), {});
  }

  void magic(const char (&expected)[5]) {
    if (buf_.size() < 4 || std::memcmp(buf_.data(), expected, 4) != 0) {
      throw IoError(path_.string() + ": bad magic, expected '" + std::string(expected) + "'");
    }
    pos_ = 4;
  }
  const char* take(std::size_t n) {
    if (buf_.size() - pos_ < n) throw IoError(path_.string() + ": truncated file");
    const char* p = buf_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint32_t u32() {
    const auto* p = reinterpret_cast<const unsigned char*>(take(4));
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    const auto* p = reinterpret_cast<const unsigned char*>(take(8));
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  void f64s(std::span<double> out) {
    if ((buf_.size() - pos_) / 8 < out.size()) throw IoError(path_.string() + ": truncated file");
    for (double& x : out) x = f64();
  }
  /// Guards allocations against corrupt size fields.
  std::uint64_t count(std::uint64_t element_bytes) {
    const std::uint64_t n = u64();
    if (element_bytes > 0 && n > (buf_.size() - pos_) / element_bytes) throw IoError(path_.string() + ": truncated file");
    return n;
  }
  void finish() const {
    if (pos_ != buf_.size()) throw IoError(path_.string() + ": trailing bytes after payload");
  }
  std::size_t& pos() { return pos_; }
  const std::vector<char>& data() const { return buf_; }

 private:
  fs::path path_;
  std::vector<char> buf_;
  std::size_t pos_ = 0;
};

void check_version(const fs::path& path, std::uint32_t found, std::uint32_t expected) {
  if (found != expected) {
    throw IoError(path.string() + ": unsupported version " + std::to_string(found) + " (expected " +
                  std::to_string(expected) + ")");
  }
}

std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

void save_grid(const fs::path& path, const VoxelGrid& grid) {
  grid.validate();
  Writer w;
  w.bytes("HFVG", 4);
  w.u32(kGridVersion);
  w.u64(static_cast<std::uint64_t>(grid.spec.resolution));
  w.u64(static_cast<std::uint64_t>(grid.spec.channels));
  for (int i = 0; i < 3; ++i) w.f64(grid.spec.extent.min[i]);
  for (int i = 0; i < 3; ++i) w.f64(grid.spec.extent.max[i]);
  w.f64s(grid.features.values());
  w.save(path);
}

VoxelGrid load_grid(const fs::path& path) {
  Reader r(path);
  r.magic("HFVG");
  check_version(path, r.u32(), kGridVersion);
  GridSpec spec;
  spec.resolution = static_cast<Index>(r.u64());
  spec.channels = static_cast<Index>(r.u64());
  for (int i = 0; i < 3; ++i) spec.extent.min[i] = r.f64();
  for (int i = 0; i < 3; ++i) spec.extent.max[i] = r.f64();
  try {
    spec.validate();
  } catch (const std::exception& e) {
    throw IoError(path.string() + ": invalid grid header: " + e.what());
  }
  if (spec.resolution > 4096 || spec.channels > 4096) throw IoError(path.string() + ": implausible grid header");
  VoxelGrid grid = VoxelGrid::zeros(spec);
  r.f64s(grid.features.values());
  r.finish();
  return grid;
}

void save_image(const fs::path& path, const Tensor& image) {
  if (image.rank() != 3) throw ShapeError("save_image expects [H, W, C]");
  Writer w;
  const std::string header =
      "HFIMG " + std::to_string(image.dim(0)) + " " + std::to_string(image.dim(1)) + " " + std::to_string(image.dim(2)) + "\n";
  w.bytes(header.data(), header.size());
  w.f64s(image.values());
  w.save(path);
}

Tensor load_image(const fs::path& path) {
  Reader r(path);
  const std::vector<char>& buf = r.data();
  if (buf.size() < 6 || std::memcmp(buf.data(), "HFIMG ", 6) != 0) {
    throw IoError(path.string() + ": bad magic, expected 'HFIMG'");
  }
  const auto eol = std::find(buf.begin(), buf.end(), '\n');
  if (eol == buf.end()) throw IoError(path.string() + ": truncated header");
  std::istringstream header(std::string(buf.begin() + 6, eol));
  Index h = -1, w = -1, c = -1;
  header >> h >> w >> c;
  if (!header || h < 1 || w < 1 || c < 1) throw IoError(path.string() + ": malformed image header");
  r.pos() = static_cast<std::size_t>(eol - buf.begin()) + 1;
  if (static_cast<std::uint64_t>(h * w * c) > (buf.size() - r.pos()) / 8) throw IoError(path.string() + ": truncated file");
  Tensor image({h, w, c});
  r.f64s(image.values());
  r.finish();
  return image;
}

void save_checkpoint(const fs::path& path, const NamedTensors& tensors) {
  Writer w;
  w.bytes("HFCK", 4);
  w.u32(kCheckpointVersion);
  w.u64(tensors.size());
  for (const auto& [name, t] : tensors) {
    w.u64(name.size());
    w.bytes(name.data(), name.size());
    w.u64(static_cast<std::uint64_t>(t.rank()));
    for (Index d : t.shape()) w.u64(static_cast<std::uint64_t>(d));
    w.f64s(t.values());
  }
  w.save(path);
}

NamedTensors load_checkpoint(const fs::path& path) {
  Reader r(path);
  r.magic("HFCK");
  check_version(path, r.u32(), kCheckpointVersion);
  const std::uint64_t count = r.count(24);
  NamedTensors out;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint64_t len = r.count(1);
    std::string name(r.take(len), len);
    const std::uint64_t rank = r.count(8);
    Shape shape;
    std::uint64_t elements = 1;
    for (std::uint64_t k = 0; k < rank; ++k) {
      shape.push_back(static_cast<Index>(r.u64()));
      elements *= static_cast<std::uint64_t>(shape.back());
      if (elements > (r.data().size() - r.pos()) / 8) throw IoError(path.string() + ": truncated file");
    }
    Tensor t(shape);
    r.f64s(t.values());
    if (!out.emplace(std::move(name), std::move(t)).second) throw IoError(path.string() + ": duplicate tensor name");
  }
  r.finish();
  return out;
}

void write_png(const fs::path& path, const Tensor& image, bool normalize) {
  const bool grey = image.rank() == 2;
  if (!grey && !(image.rank() == 3 && image.dim(2) == 3)) throw ShapeError("write_png expects [H, W] or [H, W, 3]");
  const Index H = image.dim(0), W = image.dim(1), C = grey ? 1 : 3;
  double scale = 1.0;
  if (normalize) {
    const double peak = image.size() > 0 ? image.array().maxCoeff() : 0.0;
    scale = peak > 0.0 ? 1.0 / peak : 1.0;
  }
  std::vector<unsigned char> raw;
  raw.reserve(static_cast<std::size_t>(H * (W * C + 1)));
  for (Index y = 0; y < H; ++y) {
    raw.push_back(0);  // filter: none
    for (Index i = 0; i < W * C; ++i) {
      const double v = std::clamp(image[y * W * C + i] * scale, 0.0, 1.0);
      raw.push_back(static_cast<unsigned char>(std::lround(v * 255.0)));
    }
  }
  uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
  std::vector<unsigned char> z(zlen);
  if (compress2(z.data(), &zlen, raw.data(), static_cast<uLong>(raw.size()), Z_BEST_COMPRESSION) != Z_OK) {
    throw IoError("png compression failed for " + path.string());
  }
  z.resize(zlen);

  std::vector<unsigned char> out{0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  auto be32 = [&](std::vector<unsigned char>& v, std::uint32_t x) {
    for (int i = 3; i >= 0; --i) v.push_back(static_cast<unsigned char>((x >> (8 * i)) & 0xff));
  };
  auto chunk = [&](const char* type, const std::vector<unsigned char>& payload) {
    be32(out, static_cast<std::uint32_t>(payload.size()));
    std::vector<unsigned char> body(type, type + 4);
    body.insert(body.end(), payload.begin(), payload.end());
    out.insert(out.end(), body.begin(), body.end());
    be32(out, static_cast<std::uint32_t>(crc32(0, body.data(), static_cast<uInt>(body.size()))));
  };
  std::vector<unsigned char> ihdr;
  be32(ihdr, static_cast<std::uint32_t>(W));
  be32(ihdr, static_cast<std::uint32_t>(H));
  ihdr.insert(ihdr.end(), {8, static_cast<unsigned char>(grey ? 0 : 2), 0, 0, 0});
  chunk("IHDR", ihdr);
  chunk("IDAT", z);
  chunk("IEND", {});
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("failed writing " + path.string());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), {}};
}

namespace {

std::string camera_line(const Camera& cam) {
  std::string s;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) s += (s.empty() ? "" : " ") + format_double(cam.projection(r, c));
  return s;
}

Eigen::Matrix4d read_matrix(std::istream& in, const fs::path& path) {
  Eigen::Matrix4d m;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c)
      if (!(in >> m(r, c))) throw IoError(path.string() + ": malformed projection matrix");
  return m;
}

}  // namespace

void save_posed_dataset(const fs::path& dir, std::span<const PosedImage> frames) {
  fs::create_directories(dir);
  std::ostringstream manifest;
  manifest << "HFMANIFEST 1\n";
  const double near = frames.empty() ? 0.1 : frames.front().camera.near;
  const double far = frames.empty() ? 20.0 : frames.front().camera.far;
  manifest << "near " << format_double(near) << "\nfar " << format_double(far) << "\n";
  for (std::size_t i = 0; i < frames.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%04zu.hfimg", i);
    save_image(dir / name, frames[i].image);
    write_png(fs::path(dir / name).replace_extension(".png"), frames[i].image);
    manifest << "frame " << name << " " << camera_line(frames[i].camera) << "\n";
  }
  write_text(dir / "manifest.txt", manifest.str());
}

std::vector<PosedImage> load_posed_dataset(const fs::path& dir) {
  const fs::path path = dir / "manifest.txt";
  std::istringstream in(read_text(path));
  std::string magic, key;
  int version = 0;
  if (!(in >> magic >> version) || magic != "HFMANIFEST") throw IoError(path.string() + ": bad magic, expected 'HFMANIFEST'");
  check_version(path, static_cast<std::uint32_t>(version), 1);
  double near = 0.0, far = 0.0;
  if (!(in >> key >> near) || key != "near" || !(in >> key >> far) || key != "far") {
    throw IoError(path.string() + ": missing near/far lines");
  }
  std::vector<PosedImage> frames;
  std::string file;
  while (in >> key) {
    if (key != "frame" || !(in >> file)) throw IoError(path.string() + ": malformed frame line");
    Camera cam;
    cam.projection = read_matrix(in, path);
    cam.near = near;
    cam.far = far;
    frames.push_back(make_posed_image(load_image(dir / file), cam));
  }
  return frames;
}

void save_bank(const fs::path& dir, const HypothesisBank& bank) {
  bank.validate();
  fs::create_directories(dir);
  write_text(dir / "bank.txt", "HFBANK 1\ncameras " + std::to_string(bank.size()) + "\nk " + std::to_string(bank.k()) + "\n");
  for (Index c = 0; c < bank.size(); ++c) {
    char name[32];
    std::snprintf(name, sizeof name, "camera_%04lld", static_cast<long long>(c));
    const fs::path sub = dir / name;
    fs::create_directories(sub);
    const Camera& cam = bank.cameras[static_cast<std::size_t>(c)];
    write_text(sub / "camera.txt", camera_line(cam) + "\n" + std::to_string(cam.height) + " " + std::to_string(cam.width) +
                                       " " + format_double(cam.near) + " " + format_double(cam.far) + "\n");
    for (Index k = 0; k < bank.k(); ++k) {
      save_image(sub / ("hypothesis_" + std::to_string(k) + ".hfimg"),
                 bank.hypotheses[static_cast<std::size_t>(c)][static_cast<std::size_t>(k)]);
    }
    if (!bank.conditioning.empty()) save_image(sub / "conditioning.hfimg", bank.conditioning[static_cast<std::size_t>(c)]);
  }
}

HypothesisBank load_bank(const fs::path& dir) {
  const fs::path index = dir / "bank.txt";
  std::istringstream in(read_text(index));
  std::string magic, key;
  int version = 0;
  Index cameras = 0, k = 0;
  if (!(in >> magic >> version) || magic != "HFBANK") throw IoError(index.string() + ": bad magic, expected 'HFBANK'");
  check_version(index, static_cast<std::uint32_t>(version), 1);
  if (!(in >> key >> cameras) || key != "cameras" || !(in >> key >> k) || key != "k" || cameras < 1 || k < 1) {
    throw IoError(index.string() + ": malformed bank index");
  }
  HypothesisBank bank;
  for (Index c = 0; c < cameras; ++c) {
    char name[32];
    std::snprintf(name, sizeof name, "camera_%04lld", static_cast<long long>(c));
    const fs::path sub = dir / name;
    std::istringstream cam_in(read_text(sub / "camera.txt"));
    Camera cam;
    cam.projection = read_matrix(cam_in, sub / "camera.txt");
    if (!(cam_in >> cam.height >> cam.width >> cam.near >> cam.far)) throw IoError((sub / "camera.txt").string() + ": truncated");
    bank.cameras.push_back(cam);
    std::vector<Tensor> stack;
    for (Index i = 0; i < k; ++i) stack.push_back(load_image(sub / ("hypothesis_" + std::to_string(i) + ".hfimg")));
    bank.hypotheses.push_back(std::move(stack));
    if (fs::exists(sub / "conditioning.hfimg")) bank.conditioning.push_back(load_image(sub / "conditioning.hfimg"));
  }
  try {
    bank.validate();
  } catch (const std::exception& e) {
    throw IoError(dir.string() + ": inconsistent bank: " + e.what());
  }
  return bank;
}

}  // namespace vf
