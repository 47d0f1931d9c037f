#include "glesam/image.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace glesam {
namespace {

void check_image(const Tensor& img, const char* who) {
  if (img.ndim() != 3 || img.dim(0) != 3) {
    throw std::invalid_argument(std::string(who) + ": expected a (3,H,W) tensor");
  }
}

void check_mask(const Tensor& mask, const char* who) {
  if (mask.ndim() != 2) {
    throw std::invalid_argument(std::string(who) + ": expected a (H,W) tensor");
  }
}

int to_byte(double v) {
  double r = std::lround(std::clamp(v, 0.0, 1.0) * 255.0);
  return static_cast<int>(std::clamp(r, 0.0, 255.0));
}

// (3,H,W) double [0,1] -> 8-bit BGR Mat.
cv::Mat to_mat8(const Tensor& img) {
  const int h = img.dim(1);
  const int w = img.dim(2);
  cv::Mat m(h, w, CV_8UC3);
  for (int y = 0; y < h; ++y) {
    auto* row = m.ptr<cv::Vec3b>(y);
    for (int x = 0; x < w; ++x) {
      // OpenCV stores BGR.
      row[x][0] = static_cast<unsigned char>(to_byte(img.at({2, y, x})));
      row[x][1] = static_cast<unsigned char>(to_byte(img.at({1, y, x})));
      row[x][2] = static_cast<unsigned char>(to_byte(img.at({0, y, x})));
    }
  }
  return m;
}

Tensor from_mat8(const cv::Mat& m) {
  if (m.type() != CV_8UC3) throw std::runtime_error("from_mat8: expected CV_8UC3");
  Tensor img({3, m.rows, m.cols});
  for (int y = 0; y < m.rows; ++y) {
    const auto* row = m.ptr<cv::Vec3b>(y);
    for (int x = 0; x < m.cols; ++x) {
      img.at({0, y, x}) = row[x][2] / 255.0;
      img.at({1, y, x}) = row[x][1] / 255.0;
      img.at({2, y, x}) = row[x][0] / 255.0;
    }
  }
  return img;
}

int cv_interp(ResizeAlgo a) {
  switch (a) {
    case ResizeAlgo::kBilinear: return cv::INTER_LINEAR;
    case ResizeAlgo::kBicubic: return cv::INTER_CUBIC;
    case ResizeAlgo::kArea: return cv::INTER_AREA;
  }
  throw std::invalid_argument("resize_image: unknown algorithm");
}

}  // namespace

ResizeAlgo resize_algo_from_string(const std::string& s) {
  if (s == "bilinear") return ResizeAlgo::kBilinear;
  if (s == "bicubic") return ResizeAlgo::kBicubic;
  if (s == "area") return ResizeAlgo::kArea;
  throw std::invalid_argument("unknown resize algorithm: " + s);
}

std::string to_string(ResizeAlgo a) {
  switch (a) {
    case ResizeAlgo::kBilinear: return "bilinear";
    case ResizeAlgo::kBicubic: return "bicubic";
    case ResizeAlgo::kArea: return "area";
  }
  throw std::invalid_argument("to_string: unknown resize algorithm");
}

void save_image_png(const std::string& path, const Tensor& img) {
  check_image(img, "save_image_png");
  if (!cv::imwrite(path, to_mat8(img), {cv::IMWRITE_PNG_COMPRESSION, 6})) {
    throw std::runtime_error("save_image_png: failed to write " + path);
  }
}

Tensor load_image_png(const std::string& path) {
  cv::Mat m = cv::imread(path, cv::IMREAD_COLOR);
  if (m.empty()) throw std::runtime_error("load_image_png: failed to read " + path);
  return from_mat8(m);
}

void save_mask_png(const std::string& path, const Tensor& mask) {
  check_mask(mask, "save_mask_png");
  const int h = mask.dim(0);
  const int w = mask.dim(1);
  cv::Mat m(h, w, CV_8UC1);
  for (int y = 0; y < h; ++y) {
    auto* row = m.ptr<unsigned char>(y);
    for (int x = 0; x < w; ++x) row[x] = mask.at({y, x}) > 0.5 ? 255 : 0;
  }
  if (!cv::imwrite(path, m, {cv::IMWRITE_PNG_COMPRESSION, 6})) {
    throw std::runtime_error("save_mask_png: failed to write " + path);
  }
}

Tensor load_mask_png(const std::string& path) {
  cv::Mat m = cv::imread(path, cv::IMREAD_GRAYSCALE);
  if (m.empty()) throw std::runtime_error("load_mask_png: failed to read " + path);
  Tensor mask({m.rows, m.cols});
  for (int y = 0; y < m.rows; ++y) {
    const auto* row = m.ptr<unsigned char>(y);
    for (int x = 0; x < m.cols; ++x) mask.at({y, x}) = row[x] >= 128 ? 1.0 : 0.0;
  }
  return mask;
}

Tensor quantize8(const Tensor& img) {
  Tensor out = img;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = to_byte(out[i]) / 255.0;
  return out;
}

Tensor resize_image(const Tensor& img, int out_h, int out_w, ResizeAlgo algo) {
  check_image(img, "resize_image");
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("resize_image: output dims must be >= 1");
  const int h = img.dim(1);
  const int w = img.dim(2);
  cv::Mat m(h, w, CV_32FC3);
  for (int y = 0; y < h; ++y) {
    auto* row = m.ptr<cv::Vec3f>(y);
    for (int x = 0; x < w; ++x) {
      row[x][0] = static_cast<float>(img.at({0, y, x}));
      row[x][1] = static_cast<float>(img.at({1, y, x}));
      row[x][2] = static_cast<float>(img.at({2, y, x}));
    }
  }
  cv::Mat r;
  cv::resize(m, r, cv::Size(out_w, out_h), 0.0, 0.0, cv_interp(algo));
  Tensor out({3, out_h, out_w});
  for (int y = 0; y < out_h; ++y) {
    const auto* row = r.ptr<cv::Vec3f>(y);
    for (int x = 0; x < out_w; ++x) {
      out.at({0, y, x}) = std::clamp(static_cast<double>(row[x][0]), 0.0, 1.0);
      out.at({1, y, x}) = std::clamp(static_cast<double>(row[x][1]), 0.0, 1.0);
      out.at({2, y, x}) = std::clamp(static_cast<double>(row[x][2]), 0.0, 1.0);
    }
  }
  return out;
}

Tensor jpeg_roundtrip(const Tensor& img, int quality) {
  check_image(img, "jpeg_roundtrip");
  if (quality < 1 || quality > 100) {
    throw std::invalid_argument("jpeg_roundtrip: quality must be in [1,100]");
  }
  // Channels are compressed as independent grayscale JPEGs: the codec here
  // (OpenCV 4.5) offers no control over chroma subsampling, whose forced
  // 4:2:0 mode would clamp even quality-100 round-trips to ~35 dB on
  // saturated content. Grayscale planes keep the DCT quantization artifacts
  // that matter while making quality 100 genuinely near-lossless.
  const int h = img.dim(1);
  const int w = img.dim(2);
  Tensor out({3, h, w});
  cv::Mat ch(h, w, CV_8UC1);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < h; ++y) {
      auto* row = ch.ptr<unsigned char>(y);
      for (int x = 0; x < w; ++x) {
        row[x] = static_cast<unsigned char>(to_byte(img.at({c, y, x})));
      }
    }
    std::vector<unsigned char> buf;
    if (!cv::imencode(".jpg", ch, buf, {cv::IMWRITE_JPEG_QUALITY, quality})) {
      throw std::runtime_error("jpeg_roundtrip: encode failed");
    }
    cv::Mat dec = cv::imdecode(buf, cv::IMREAD_GRAYSCALE);
    if (dec.empty()) throw std::runtime_error("jpeg_roundtrip: decode failed");
    if (dec.rows != h || dec.cols != w) throw std::runtime_error("jpeg_roundtrip: size mismatch");
    for (int y = 0; y < h; ++y) {
      const auto* row = dec.ptr<unsigned char>(y);
      for (int x = 0; x < w; ++x) out.at({c, y, x}) = row[x] / 255.0;
    }
  }
  return out;
}

Tensor convolve_reflect(const Tensor& img, const Tensor& kernel) {
  check_image(img, "convolve_reflect");
  if (kernel.ndim() != 2 || kernel.dim(0) != kernel.dim(1)) {
    throw std::invalid_argument("convolve_reflect: kernel must be square (K,K)");
  }
  const int h = img.dim(1);
  const int w = img.dim(2);
  const int k = kernel.dim(0);
  cv::Mat km(k, k, CV_64FC1);
  for (int y = 0; y < k; ++y) {
    for (int x = 0; x < k; ++x) km.at<double>(y, x) = kernel.at({y, x});
  }
  Tensor out({3, h, w});
  cv::Mat ch(h, w, CV_64FC1), fch;
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) ch.at<double>(y, x) = img.at({c, y, x});
    }
    // Kernels here are radially symmetric, so correlation == convolution.
    cv::filter2D(ch, fch, CV_64F, km, cv::Point(-1, -1), 0.0, cv::BORDER_REFLECT_101);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        out.at({c, y, x}) = std::clamp(fch.at<double>(y, x), 0.0, 1.0);
      }
    }
  }
  return out;
}

}  // namespace glesam
