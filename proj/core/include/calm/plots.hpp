#pragma once

// Plot emission: loss curves, per-expert importance bars, and a 2-D PCA
// projection of embeddings colored by culture. Every plot also writes its
// underlying CSV so rendering is optional.

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "calm/common.hpp"

namespace calm::plots {

// Minimal RGB canvas serialized as PNG (fixed zlib settings, so output
// bytes are deterministic for identical input).
class Canvas {
 public:
  Canvas(int width, int height);
  void set_pixel(int x, int y, unsigned char r, unsigned char g, unsigned char b);
  void draw_line(int x0, int y0, int x1, int y1, unsigned char r, unsigned char g,
                 unsigned char b);
  void fill_rect(int x0, int y0, int x1, int y1, unsigned char r, unsigned char g,
                 unsigned char b);
  void write_png(const std::string& path) const;
  int width() const { return w_; }
  int height() const { return h_; }

 private:
  int w_, h_;
  std::vector<unsigned char> pix_;  // RGB rows
};

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<double>>& rows);

// Reads metrics.json / routing-stats.json / embeddings.csv from
// metrics_dir and writes CSVs + PNGs into it. Missing metrics.json is an
// error; the other inputs are optional.
void emit_plots(const std::string& metrics_dir);

// 2-D PCA projection (largest two principal components).
Eigen::MatrixXd pca2(const Eigen::MatrixXd& embeddings);

}  // namespace calm::plots
