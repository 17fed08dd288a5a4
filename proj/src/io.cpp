#include "mcslam/io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <limits>
#include <sstream>
#include <string>
#include <string_view>

#include <Eigen/Eigenvalues>

#include "mcslam/error.hpp"

namespace mcslam {

namespace {

enum class FieldType { kFloat, kUchar, kUint };

struct Field {
  const char* name;
  FieldType type;
};

constexpr Field kVertexFields[] = {
    {"x", FieldType::kFloat},     {"y", FieldType::kFloat},      {"z", FieldType::kFloat},
    {"nx", FieldType::kFloat},    {"ny", FieldType::kFloat},     {"nz", FieldType::kFloat},
    {"radius", FieldType::kFloat}, {"red", FieldType::kUchar},   {"green", FieldType::kUchar},
    {"blue", FieldType::kUchar},  {"s00", FieldType::kFloat},    {"s01", FieldType::kFloat},
    {"s02", FieldType::kFloat},   {"s11", FieldType::kFloat},    {"s12", FieldType::kFloat},
    {"s22", FieldType::kFloat},   {"x00", FieldType::kFloat},    {"x01", FieldType::kFloat},
    {"x02", FieldType::kFloat},   {"x11", FieldType::kFloat},    {"x12", FieldType::kFloat},
    {"x22", FieldType::kFloat},   {"nu", FieldType::kFloat},     {"obs_count", FieldType::kUint},
    {"timestamp", FieldType::kFloat}, {"created", FieldType::kFloat}, {"stable", FieldType::kUchar},
    {"colour_sigma", FieldType::kFloat}, {"q00", FieldType::kFloat}, {"q01", FieldType::kFloat},
    {"q02", FieldType::kFloat},   {"q11", FieldType::kFloat},    {"q12", FieldType::kFloat},
    {"q22", FieldType::kFloat},
};
constexpr std::size_t kFieldCount = std::size(kVertexFields);

constexpr std::size_t field_size(FieldType t) { return t == FieldType::kUchar ? 1 : 4; }

constexpr std::size_t vertex_size() {
  std::size_t n = 0;
  for (const Field& f : kVertexFields) n += field_size(f.type);
  return n;
}

const char* ply_type_name(FieldType t) {
  switch (t) {
    case FieldType::kFloat: return "float";
    case FieldType::kUchar: return "uchar";
    case FieldType::kUint: return "uint";
  }
  return "";
}

[[noreturn]] void parse_error(std::size_t offset, const std::string& what) {
  throw Error(ErrorCode::kParse, "byte " + std::to_string(offset) + ": " + what);
}

std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big)
    return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  return v;
}

void put_u32(std::string& out, std::uint32_t v) {
  v = to_little(v);
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

void put_float(std::string& out, double v) { put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v))); }

std::uint32_t get_u32(const char* p) {
  std::uint32_t v;
  std::memcpy(&v, p, 4);
  return to_little(v);
}

double get_float(const char* p) { return static_cast<double>(std::bit_cast<float>(get_u32(p))); }

unsigned char colour_byte(double c) {
  return static_cast<unsigned char>(std::clamp(std::lround(c * 255.0), 0L, 255L));
}

// Values of one surfel in field order, before narrowing.
std::vector<double> surfel_values(const DenseSurfel& s, double radius) {
  const Mat3& S = s.cov_position;
  const Mat3& X = s.scatter;
  const Mat3& Q = s.noise;
  return {s.position.x(), s.position.y(), s.position.z(), s.normal.x(), s.normal.y(), s.normal.z(), radius,
          s.colour.x(),   s.colour.y(),   s.colour.z(),   S(0, 0),      S(0, 1),      S(0, 2),      S(1, 1),
          S(1, 2),        S(2, 2),        X(0, 0),        X(0, 1),      X(0, 2),      X(1, 1),      X(1, 2),
          X(2, 2),        s.dof,          static_cast<double>(s.obs_count), s.timestamp, s.created,
          s.stable ? 1.0 : 0.0, s.colour_sigma, Q(0, 0), Q(0, 1), Q(0, 2), Q(1, 1), Q(1, 2), Q(2, 2)};
}

Mat3 symmetric(const double* v) {
  Mat3 M;
  M << v[0], v[1], v[2], v[1], v[3], v[4], v[2], v[4], v[5];
  return M;
}

DenseSurfel surfel_from_values(const std::vector<double>& v) {
  DenseSurfel s;
  s.position = Vec3(v[0], v[1], v[2]);
  s.normal = Vec3(v[3], v[4], v[5]);
  s.colour = Vec3(v[7], v[8], v[9]);
  s.cov_position = symmetric(&v[10]);
  s.scatter = symmetric(&v[16]);
  s.dof = v[22];
  s.obs_count = static_cast<std::size_t>(v[23]);
  s.timestamp = v[24];
  s.created = v[25];
  s.stable = v[26] != 0.0;
  s.colour_sigma = v[27];
  s.noise = symmetric(&v[28]);
  return s;
}

// PSD up to float32 rounding of the entries.
bool psd_to_rounding(const Mat3& M) {
  const Vec3 ev = Eigen::SelfAdjointEigenSolver<Mat3>(M, Eigen::EigenvaluesOnly).eigenvalues();
  return ev.minCoeff() >= -1e-6 * ev.cwiseAbs().maxCoeff();
}

std::string slurp(std::istream& is) {
  std::string data((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (is.bad()) throw Error(ErrorCode::kIo, "read failed");
  return data;
}

std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(sep, start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

double parse_double(std::string_view s, std::size_t offset) {
  double v = 0.0;
  const char* end = s.data() + s.size();
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  const auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end) parse_error(offset, "bad number '" + std::string(s) + "'");
  return v;
}

// Rows of a numeric CSV with a fixed header; strict column count.
std::vector<std::vector<double>> read_numeric_csv(std::istream& is, const std::string& header) {
  const std::string data = slurp(is);
  std::vector<std::vector<double>> rows;
  const std::size_t columns = split(header, ',').size();
  std::size_t pos = 0;
  bool first = true;
  while (pos < data.size()) {
    std::size_t eol = data.find('\n', pos);
    if (eol == std::string::npos) parse_error(data.size(), "missing newline at end of file");
    std::string_view line(data.data() + pos, eol - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (first) {
      if (line != header) parse_error(pos, "unexpected header");
      first = false;
    } else {
      const std::vector<std::string_view> cells = split(line, ',');
      if (cells.size() != columns)
        parse_error(pos, "expected " + std::to_string(columns) + " fields, got " + std::to_string(cells.size()));
      std::vector<double> row;
      row.reserve(columns);
      for (std::string_view c : cells) row.push_back(parse_double(c, static_cast<std::size_t>(c.data() - data.data())));
      rows.push_back(std::move(row));
    }
    pos = eol + 1;
  }
  if (first) parse_error(0, "empty input");
  return rows;
}

std::string vertex_csv_header() {
  std::string h;
  for (const Field& f : kVertexFields) {
    if (!h.empty()) h += ',';
    h += f.name;
  }
  return h;
}

template <typename Write>
void write_atomic(const std::filesystem::path& path, Write&& write) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error(ErrorCode::kIo, "cannot open " + tmp.string());
    write(os);
    os.flush();
    if (!os) throw Error(ErrorCode::kIo, "write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::kIo, "cannot rename " + tmp.string() + ": " + ec.message());
}

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  return is;
}

}  // namespace

void write_surfel_ply(std::ostream& os, const SurfelMap& map) {
  std::ostringstream header;
  header << "ply\nformat binary_little_endian 1.0\n"
         << "comment mcslam surfel format " << kSurfelPlyVersion << '\n'
         << "comment radius " << std::setprecision(std::numeric_limits<float>::max_digits10)
         << static_cast<float>(map.radius()) << '\n'
         << "element vertex " << map.size() << '\n';
  for (const Field& f : kVertexFields) header << "property " << ply_type_name(f.type) << ' ' << f.name << '\n';
  header << "end_header\n";

  std::string body;
  body.reserve(map.size() * vertex_size());
  for (const auto& [id, s] : map.surfels()) {
    if (s.obs_count > std::numeric_limits<std::uint32_t>::max())
      throw Error(ErrorCode::kInvalidArgument, "obs_count exceeds uint32");
    const std::vector<double> v = surfel_values(s, map.radius());
    for (std::size_t i = 0; i < kFieldCount; ++i) {
      switch (kVertexFields[i].type) {
        case FieldType::kFloat: put_float(body, v[i]); break;
        case FieldType::kUint: put_u32(body, static_cast<std::uint32_t>(v[i])); break;
        case FieldType::kUchar:
          body.push_back(static_cast<char>(i == 26 ? (v[i] != 0.0 ? 1 : 0) : colour_byte(v[i])));
          break;
      }
    }
  }
  const std::string h = header.str();
  os.write(h.data(), static_cast<std::streamsize>(h.size()));
  os.write(body.data(), static_cast<std::streamsize>(body.size()));
  if (!os) throw Error(ErrorCode::kIo, "write failed");
}

SurfelMap read_surfel_ply(std::istream& is) {
  const std::string data = slurp(is);
  std::size_t pos = 0;
  auto next_line = [&](std::size_t& line_start) -> std::string_view {
    line_start = pos;
    const std::size_t eol = data.find('\n', pos);
    if (eol == std::string::npos) parse_error(pos, "unterminated header");
    pos = eol + 1;
    return std::string_view(data.data() + line_start, eol - line_start);
  };

  std::size_t at = 0;
  if (next_line(at) != "ply") parse_error(at, "missing ply magic");
  if (next_line(at) != "format binary_little_endian 1.0") parse_error(at, "unsupported format");

  double radius = std::numeric_limits<double>::quiet_NaN();
  long long count = -1;
  std::size_t field = 0;
  while (true) {
    const std::string_view line = next_line(at);
    if (line == "end_header") break;
    const std::vector<std::string_view> w = split(line, ' ');
    if (w[0] == "comment") {
      if (w.size() == 5 && w[1] == "mcslam" && w[2] == "surfel" && w[3] == "format") {
        if (w[4] != std::to_string(kSurfelPlyVersion)) parse_error(at, "unsupported surfel format " + std::string(w[4]));
      } else if (w.size() == 3 && w[1] == "radius") {
        float r = 0.0f;
        const auto [ptr, ec] = std::from_chars(w[2].data(), w[2].data() + w[2].size(), r);
        if (ec != std::errc() || ptr != w[2].data() + w[2].size()) parse_error(at, "bad radius");
        radius = r;
      }
    } else if (w[0] == "element") {
      if (w.size() != 3 || w[1] != "vertex" || count >= 0) parse_error(at, "unexpected element line");
      const double n = parse_double(w[2], static_cast<std::size_t>(w[2].data() - data.data()));
      if (n < 0 || n != std::floor(n)) parse_error(at, "bad vertex count");
      count = static_cast<long long>(n);
    } else if (w[0] == "property") {
      if (count < 0) parse_error(at, "property before element");
      if (field >= kFieldCount || w.size() != 3 || w[1] != ply_type_name(kVertexFields[field].type) ||
          w[2] != kVertexFields[field].name)
        parse_error(at, "unexpected property '" + std::string(line) + "'");
      ++field;
    } else {
      parse_error(at, "unexpected header line '" + std::string(line) + "'");
    }
  }
  if (count < 0) parse_error(at, "no vertex element");
  if (field != kFieldCount) parse_error(at, "missing properties");
  if (!std::isfinite(radius) || radius <= 0.0) parse_error(at, "missing or invalid radius comment");

  const std::size_t need = static_cast<std::size_t>(count) * vertex_size();
  if (data.size() - pos < need)
    parse_error(data.size(), "truncated body, expected " + std::to_string(pos + need) + " bytes");
  if (data.size() - pos > need) parse_error(pos + need, "trailing data after body");

  std::vector<DenseSurfel> surfels;
  surfels.reserve(static_cast<std::size_t>(count));
  std::vector<double> v(kFieldCount);
  for (long long k = 0; k < count; ++k) {
    const std::size_t record = pos;
    for (std::size_t i = 0; i < kFieldCount; ++i) {
      const char* p = data.data() + pos;
      switch (kVertexFields[i].type) {
        case FieldType::kFloat: v[i] = get_float(p); break;
        case FieldType::kUint: v[i] = static_cast<double>(get_u32(p)); break;
        case FieldType::kUchar: {
          const auto b = static_cast<unsigned char>(*p);
          if (i == 26 && b > 1) parse_error(pos, "stable flag not 0 or 1");
          v[i] = i == 26 ? b : b / 255.0;
          break;
        }
      }
      pos += field_size(kVertexFields[i].type);
    }
    DenseSurfel s = surfel_from_values(v);
    if (!psd_to_rounding(s.cov_position) || !psd_to_rounding(s.scatter)) parse_error(record, "covariance not PSD");
    surfels.push_back(std::move(s));
  }
  SurfelMap map(radius);
  for (DenseSurfel& s : surfels) map.insert_verbatim(std::move(s));
  return map;
}

void write_surfel_csv(std::ostream& os, const SurfelMap& map) {
  os << vertex_csv_header() << '\n' << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const auto& [id, s] : map.surfels()) {
    const std::vector<double> v = surfel_values(s, map.radius());
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    os << '\n';
  }
  if (!os) throw Error(ErrorCode::kIo, "write failed");
}

SurfelMap read_surfel_csv(std::istream& is) {
  const std::vector<std::vector<double>> rows = read_numeric_csv(is, vertex_csv_header());
  const double radius = rows.empty() ? 0.02 : rows.front()[6];
  SurfelMap map(radius);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    DenseSurfel s = surfel_from_values(rows[k]);
    if (!psd_to_rounding(s.cov_position) || !psd_to_rounding(s.scatter))
      throw Error(ErrorCode::kParse, "row " + std::to_string(k + 1) + ": covariance not PSD");
    map.insert_verbatim(std::move(s));
  }
  return map;
}

void write_sparse_csv(std::ostream& os, const std::vector<SparseSurfel>& sparse) {
  os << "level,count,timestamp,cx,cy,cz,c00,c01,c02,c11,c12,c22,planarity,degenerate,nx,ny,nz\n"
     << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const SparseSurfel& s : sparse) {
    const Mat3& C = s.covariance;
    os << s.level << ',' << s.count << ',' << s.timestamp << ',' << s.centroid.x() << ',' << s.centroid.y() << ','
       << s.centroid.z() << ',' << C(0, 0) << ',' << C(0, 1) << ',' << C(0, 2) << ',' << C(1, 1) << ',' << C(1, 2) << ','
       << C(2, 2) << ',' << s.planarity << ',' << (s.degenerate ? 1 : 0) << ',' << s.normal.x() << ',' << s.normal.y()
       << ',' << s.normal.z() << '\n';
  }
  if (!os) throw Error(ErrorCode::kIo, "write failed");
}

std::vector<SparseSurfel> read_sparse_csv(std::istream& is) {
  const auto rows = read_numeric_csv(
      is, "level,count,timestamp,cx,cy,cz,c00,c01,c02,c11,c12,c22,planarity,degenerate,nx,ny,nz");
  std::vector<SparseSurfel> out;
  out.reserve(rows.size());
  for (const std::vector<double>& r : rows) {
    SparseSurfel s;
    s.level = static_cast<int>(r[0]);
    s.count = static_cast<std::size_t>(r[1]);
    s.timestamp = r[2];
    s.centroid = Vec3(r[3], r[4], r[5]);
    s.covariance = symmetric(&r[6]);
    s.planarity = r[12];
    s.degenerate = r[13] != 0.0;
    s.normal = Vec3(r[14], r[15], r[16]);
    out.push_back(s);
  }
  return out;
}

void write_trajectory_csv(std::ostream& os, const Trajectory& traj) {
  os << "time,tx,ty,tz,r00,r01,r02,r10,r11,r12,r20,r21,r22\n"
     << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const TimedPose& s : traj.samples()) {
    const Vec3& t = s.pose.translation();
    const Mat3& R = s.pose.rotation();
    os << s.time << ',' << t.x() << ',' << t.y() << ',' << t.z();
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) os << ',' << R(i, j);
    os << '\n';
  }
  if (!os) throw Error(ErrorCode::kIo, "write failed");
}

Trajectory read_trajectory_csv(std::istream& is, double rate_hz) {
  const auto rows = read_numeric_csv(is, "time,tx,ty,tz,r00,r01,r02,r10,r11,r12,r20,r21,r22");
  std::vector<TimedPose> samples;
  samples.reserve(rows.size());
  for (const std::vector<double>& r : rows) {
    Mat3 R;
    R << r[4], r[5], r[6], r[7], r[8], r[9], r[10], r[11], r[12];
    samples.push_back({r[0], Pose(R, Vec3(r[1], r[2], r[3]))});
  }
  if (samples.empty()) return Trajectory();
  if (rate_hz <= 0.0) {
    rate_hz = samples.size() > 1
                  ? static_cast<double>(samples.size() - 1) / (samples.back().time - samples.front().time)
                  : Trajectory::kDefaultRateHz;
  }
  return Trajectory(std::move(samples), rate_hz);
}

void write_surfel_ply(const std::filesystem::path& path, const SurfelMap& map) {
  write_atomic(path, [&](std::ostream& os) { write_surfel_ply(os, map); });
}

SurfelMap read_surfel_ply(const std::filesystem::path& path) {
  std::ifstream is = open_input(path);
  return read_surfel_ply(is);
}

void write_surfel_csv(const std::filesystem::path& path, const SurfelMap& map) {
  write_atomic(path, [&](std::ostream& os) { write_surfel_csv(os, map); });
}

SurfelMap read_surfel_csv(const std::filesystem::path& path) {
  std::ifstream is = open_input(path);
  return read_surfel_csv(is);
}

void write_trajectory_csv(const std::filesystem::path& path, const Trajectory& traj) {
  write_atomic(path, [&](std::ostream& os) { write_trajectory_csv(os, traj); });
}

Trajectory read_trajectory_csv(const std::filesystem::path& path, double rate_hz) {
  std::ifstream is = open_input(path);
  return read_trajectory_csv(is, rate_hz);
}

}  // namespace mcslam
