#include "calm/plots.hpp"

#include <zlib.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

namespace calm::plots {

using json = nlohmann::ordered_json;

Canvas::Canvas(int width, int height)
    : w_(width), h_(height), pix_(static_cast<std::size_t>(width) * height * 3, 255) {}

void Canvas::set_pixel(int x, int y, unsigned char r, unsigned char g, unsigned char b) {
  if (x < 0 || y < 0 || x >= w_ || y >= h_) return;
  std::size_t i = 3 * (static_cast<std::size_t>(y) * w_ + x);
  pix_[i] = r;
  pix_[i + 1] = g;
  pix_[i + 2] = b;
}

void Canvas::draw_line(int x0, int y0, int x1, int y1, unsigned char r, unsigned char g,
                       unsigned char b) {
  // Bresenham.
  int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
  int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  while (true) {
    set_pixel(x0, y0, r, g, b);
    if (x0 == x1 && y0 == y1) break;
    int e2 = 2 * err;
    if (e2 >= dy) { err += dy; x0 += sx; }
    if (e2 <= dx) { err += dx; y0 += sy; }
  }
}

void Canvas::fill_rect(int x0, int y0, int x1, int y1, unsigned char r, unsigned char g,
                       unsigned char b) {
  for (int y = std::min(y0, y1); y <= std::max(y0, y1); ++y)
    for (int x = std::min(x0, x1); x <= std::max(x0, x1); ++x) set_pixel(x, y, r, g, b);
}

namespace {

void put_u32(std::vector<unsigned char>& v, std::uint32_t x) {
  v.push_back((x >> 24) & 0xff);
  v.push_back((x >> 16) & 0xff);
  v.push_back((x >> 8) & 0xff);
  v.push_back(x & 0xff);
}

void write_chunk(std::ofstream& f, const char type[4],
                 const std::vector<unsigned char>& data) {
  std::vector<unsigned char> len;
  put_u32(len, static_cast<std::uint32_t>(data.size()));
  f.write(reinterpret_cast<const char*>(len.data()), 4);
  f.write(type, 4);
  if (!data.empty()) f.write(reinterpret_cast<const char*>(data.data()),
                             static_cast<std::streamsize>(data.size()));
  std::uint32_t crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(type), 4);
  if (!data.empty()) crc = crc32(crc, data.data(), static_cast<uInt>(data.size()));
  std::vector<unsigned char> crcb;
  put_u32(crcb, crc);
  f.write(reinterpret_cast<const char*>(crcb.data()), 4);
}

}  // namespace

void Canvas::write_png(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError("png: cannot write " + path);
  static const unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  f.write(reinterpret_cast<const char*>(sig), 8);

  std::vector<unsigned char> ihdr;
  put_u32(ihdr, static_cast<std::uint32_t>(w_));
  put_u32(ihdr, static_cast<std::uint32_t>(h_));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // RGB
  ihdr.push_back(0);   // deflate
  ihdr.push_back(0);   // filter method
  ihdr.push_back(0);   // no interlace
  write_chunk(f, "IHDR", ihdr);

  // Raw scanlines with filter byte 0.
  std::vector<unsigned char> raw;
  raw.reserve(static_cast<std::size_t>(h_) * (1 + 3 * w_));
  for (int y = 0; y < h_; ++y) {
    raw.push_back(0);
    const unsigned char* row = &pix_[3 * static_cast<std::size_t>(y) * w_];
    raw.insert(raw.end(), row, row + 3 * w_);
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<unsigned char> comp(bound);
  if (compress2(comp.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw InputError("png: deflate failed");
  comp.resize(bound);
  write_chunk(f, "IDAT", comp);
  write_chunk(f, "IEND", {});
}

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<double>>& rows) {
  std::ofstream f(path);
  if (!f) throw InputError("csv: cannot write " + path);
  for (std::size_t i = 0; i < header.size(); ++i)
    f << header[i] << (i + 1 < header.size() ? "," : "\n");
  char buf[64];
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.12g", row[i]);
      f << buf << (i + 1 < row.size() ? "," : "\n");
    }
  }
}

Eigen::MatrixXd pca2(const Eigen::MatrixXd& embeddings) {
  Eigen::MatrixXd centered = embeddings.rowwise() - embeddings.colwise().mean();
  Eigen::MatrixXd cov =
      centered.transpose() * centered / std::max<double>(1.0, embeddings.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  Eigen::Index d = cov.rows();
  Eigen::MatrixXd top(d, 2);
  top.col(0) = es.eigenvectors().col(d - 1);
  top.col(1) = es.eigenvectors().col(d >= 2 ? d - 2 : d - 1);
  // Fix sign for determinism: largest-magnitude entry positive.
  for (int c = 0; c < 2; ++c) {
    Eigen::Index imax;
    top.col(c).cwiseAbs().maxCoeff(&imax);
    if (top(imax, c) < 0) top.col(c) = -top.col(c);
  }
  return centered * top;
}

namespace {

const unsigned char kPalette[10][3] = {
    {31, 119, 180}, {255, 127, 14}, {44, 160, 44},  {214, 39, 40},  {148, 103, 189},
    {140, 86, 75},  {227, 119, 194}, {127, 127, 127}, {188, 189, 34}, {23, 190, 207}};

void loss_curves(const json& metrics, const std::string& dir) {
  std::vector<std::string> header = {"epoch",      "total",   "task",    "window",
                                     "explicit_aux", "latent_aux", "balance", "identity"};
  std::vector<std::vector<double>> rows;
  for (const auto& e : metrics.at("history")) {
    rows.push_back({static_cast<double>(rows.size()), e.at("total"), e.at("task"),
                    e.at("window"), e.at("explicit_aux"), e.at("latent_aux"),
                    e.at("balance"), e.at("identity")});
  }
  write_csv(dir + "/loss_curves.csv", header, rows);

  Canvas cv(640, 400);
  if (!rows.empty()) {
    double lo = 1e300, hi = -1e300;
    for (const auto& r : rows) { lo = std::min(lo, r[1]); hi = std::max(hi, r[1]); }
    if (hi <= lo) hi = lo + 1.0;
    auto px = [&](std::size_t i) {
      return 40 + static_cast<int>(560.0 * i / std::max<std::size_t>(1, rows.size() - 1));
    };
    auto py = [&](double v) {
      return 380 - static_cast<int>(360.0 * (v - lo) / (hi - lo));
    };
    cv.draw_line(40, 380, 600, 380, 0, 0, 0);
    cv.draw_line(40, 20, 40, 380, 0, 0, 0);
    for (std::size_t i = 1; i < rows.size(); ++i)
      cv.draw_line(px(i - 1), py(rows[i - 1][1]), px(i), py(rows[i][1]), 31, 119, 180);
  }
  cv.write_png(dir + "/loss_curves.png");
}

void importance_bars(const json& stats, const std::string& dir) {
  std::vector<std::string> header = {"dimension", "expert", "importance"};
  std::vector<std::vector<double>> rows;
  std::vector<double> flat;
  if (stats.contains("importance")) {
    int d = 0;
    for (const auto& dim : stats.at("importance")) {
      int e = 0;
      for (const auto& v : dim) {
        rows.push_back({static_cast<double>(d), static_cast<double>(e),
                        v.get<double>()});
        flat.push_back(v.get<double>());
        ++e;
      }
      ++d;
    }
  }
  write_csv(dir + "/expert_importance.csv", header, rows);

  Canvas cv(640, 400);
  if (!flat.empty()) {
    double hi = 1e-12;
    for (double v : flat) hi = std::max(hi, v);
    int n = static_cast<int>(flat.size());
    int bw = std::max(2, 560 / std::max(1, n));
    for (int i = 0; i < n; ++i) {
      int h = static_cast<int>(340.0 * flat[i] / hi);
      const auto& c = kPalette[(i / 4) % 10];
      cv.fill_rect(40 + i * bw + 1, 380 - h, 40 + (i + 1) * bw - 1, 380, c[0], c[1], c[2]);
    }
    cv.draw_line(40, 380, 600, 380, 0, 0, 0);
  }
  cv.write_png(dir + "/expert_importance.png");
}

void embedding_scatter(const std::string& dir) {
  std::string in = dir + "/embeddings.csv";
  std::ifstream f(in);
  std::vector<std::vector<double>> emb;
  std::vector<int> cultures;
  if (f) {
    std::string line;
    std::getline(f, line);  // header
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      std::vector<double> vals;
      std::size_t pos = 0;
      while (pos <= line.size()) {
        std::size_t comma = line.find(',', pos);
        std::string tok = line.substr(pos, comma == std::string::npos ? std::string::npos
                                                                      : comma - pos);
        vals.push_back(std::stod(tok));
        if (comma == std::string::npos) break;
        pos = comma + 1;
      }
      cultures.push_back(static_cast<int>(vals[0]));
      emb.push_back(std::vector<double>(vals.begin() + 1, vals.end()));
    }
  }
  std::vector<std::string> header = {"culture_id", "x", "y"};
  std::vector<std::vector<double>> rows;
  Canvas cv(640, 640);
  if (!emb.empty()) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(emb.size()),
                      static_cast<Eigen::Index>(emb[0].size()));
    for (std::size_t i = 0; i < emb.size(); ++i)
      for (std::size_t j = 0; j < emb[i].size(); ++j)
        m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = emb[i][j];
    Eigen::MatrixXd proj = pca2(m);
    double xlo = proj.col(0).minCoeff(), xhi = proj.col(0).maxCoeff();
    double ylo = proj.col(1).minCoeff(), yhi = proj.col(1).maxCoeff();
    if (xhi <= xlo) xhi = xlo + 1;
    if (yhi <= ylo) yhi = ylo + 1;
    for (Eigen::Index i = 0; i < proj.rows(); ++i) {
      rows.push_back({static_cast<double>(cultures[i]), proj(i, 0), proj(i, 1)});
      int x = 20 + static_cast<int>(600.0 * (proj(i, 0) - xlo) / (xhi - xlo));
      int y = 620 - static_cast<int>(600.0 * (proj(i, 1) - ylo) / (yhi - ylo));
      const auto& c = kPalette[cultures[i] % 10];
      cv.fill_rect(x - 1, y - 1, x + 1, y + 1, c[0], c[1], c[2]);
    }
  }
  write_csv(dir + "/embedding_projection.csv", header, rows);
  cv.write_png(dir + "/embedding_projection.png");
}

}  // namespace

void emit_plots(const std::string& metrics_dir) {
  std::string mpath = metrics_dir + "/metrics.json";
  std::ifstream mf(mpath);
  if (!mf) throw ConfigError("plots: missing " + mpath);
  json metrics = json::parse(mf);
  loss_curves(metrics, metrics_dir);

  json stats = json::object();
  std::ifstream sf(metrics_dir + "/routing-stats.json");
  if (sf) stats = json::parse(sf);
  importance_bars(stats, metrics_dir);
  embedding_scatter(metrics_dir);
}

}  // namespace calm::plots
