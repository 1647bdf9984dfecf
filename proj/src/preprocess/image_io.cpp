#include "covidscreen/preprocess/image_io.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <fstream>
#include <iterator>

namespace covidscreen::preprocess {
namespace {

DecodedImage from_mat(const cv::Mat& raw) {
  if (raw.empty()) throw UndecodableImage("image data could not be decoded");
  const int src_channels = raw.channels();
  const int depth_bits = raw.depth() == CV_16U ? 16 : raw.depth() == CV_8U ? 8 : 32;
  DecodedImage out;
  out.bit_depth = depth_bits * src_channels;

  cv::Mat eight;
  if (raw.depth() == CV_8U) {
    eight = raw;
  } else if (raw.depth() == CV_16U) {
    raw.convertTo(eight, CV_8U, 1.0 / 257.0);
  } else {
    raw.convertTo(eight, CV_8U);
  }

  // Drop alpha; keep single channel images single channel.
  const int channels = eight.channels() == 1 ? 1 : 3;
  RasterImage img(eight.rows, eight.cols, channels);
  for (int y = 0; y < eight.rows; ++y) {
    const std::uint8_t* row = eight.ptr<std::uint8_t>(y);
    for (int x = 0; x < eight.cols; ++x) {
      const std::uint8_t* px = row + static_cast<std::ptrdiff_t>(x) * eight.channels();
      if (channels == 1) {
        img.at(y, x, 0) = px[0];
      } else if (eight.channels() == 2) {
        img.at(y, x, 0) = img.at(y, x, 1) = img.at(y, x, 2) = px[0];
      } else {
        // OpenCV stores BGR(A).
        img.at(y, x, 0) = px[2];
        img.at(y, x, 1) = px[1];
        img.at(y, x, 2) = px[0];
      }
    }
  }
  out.image = std::move(img);
  return out;
}

cv::Mat to_mat(const RasterImage& img) {
  if (img.channels() == 1) {
    cv::Mat m(img.height(), img.width(), CV_8UC1);
    std::copy(img.data(), img.data() + img.size(), m.ptr<std::uint8_t>(0));
    return m;
  }
  cv::Mat m(img.height(), img.width(), CV_8UC3);
  for (int y = 0; y < img.height(); ++y) {
    std::uint8_t* row = m.ptr<std::uint8_t>(y);
    for (int x = 0; x < img.width(); ++x) {
      row[3 * x + 0] = img.at(y, x, 2);
      row[3 * x + 1] = img.at(y, x, 1);
      row[3 * x + 2] = img.at(y, x, 0);
    }
  }
  return m;
}

}  // namespace

DecodedImage decode_image(std::span<const std::uint8_t> bytes) {
  if (bytes.empty()) throw UndecodableImage("empty image payload");
  const cv::Mat buf(1, static_cast<int>(bytes.size()), CV_8UC1,
                    const_cast<std::uint8_t*>(bytes.data()));
  cv::Mat raw;
  try {
    raw = cv::imdecode(buf, cv::IMREAD_UNCHANGED);
  } catch (const cv::Exception& e) {
    throw UndecodableImage(std::string("image decode failed: ") + e.what());
  }
  return from_mat(raw);
}

DecodedImage read_image(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return decode_image(bytes);
  } catch (const UndecodableImage&) {
    throw UndecodableImage("cannot decode image: " + path.string());
  }
}

RasterImage to_rgb(const RasterImage& img) {
  if (img.channels() == 3) return img;
  RasterImage out(img.height(), img.width(), 3);
  for (Eigen::Index i = 0; i < img.size(); ++i) {
    out.data()[3 * i] = out.data()[3 * i + 1] = out.data()[3 * i + 2] = img.data()[i];
  }
  return out;
}

std::vector<std::uint8_t> encode_png(const RasterImage& img) {
  std::vector<std::uint8_t> out;
  const std::vector<int> params = {cv::IMWRITE_PNG_COMPRESSION, 6};
  if (!cv::imencode(".png", to_mat(img), out, params)) {
    throw InvalidArgument("PNG encoding failed");
  }
  return out;
}

void write_image(const std::filesystem::path& path, const RasterImage& img) {
  if (!cv::imwrite(path.string(), to_mat(img))) {
    throw InvalidArgument("cannot write image: " + path.string());
  }
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingFile("cannot open file: " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(is), {});
}

}  // namespace covidscreen::preprocess
