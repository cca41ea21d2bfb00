#pragma once

// Neural backend: an exported image encoder and prompt decoder pair, run through
// the OpenCV DNN ONNX importer.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>
#include <opencv2/dnn.hpp>
#include <opencv2/imgproc.hpp>

#include "matseg/backend.hpp"
#include "matseg/onnx_graph.hpp"

namespace matseg {

/// Contents of metadata.json written next to the exported graphs.
struct ModelMetadata {
  int input_side = 1024;
  int channels = 256;
  int height = 64;
  int width = 64;
  std::array<double, 3> pixel_mean{123.675, 116.28, 103.53};
  std::array<double, 3> pixel_std{58.395, 57.12, 57.375};

  static ModelMetadata load(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw BackendError("cannot open model metadata " + path.string());
    ModelMetadata m;
    try {
      const auto j = nlohmann::json::parse(f);
      m.input_side = j.at("input_side").get<int>();
      const auto emb = j.at("embedding").get<std::vector<int>>();
      if (emb.size() != 3) throw BackendError("embedding must list [C, H, W]");
      m.channels = emb[0];
      m.height = emb[1];
      m.width = emb[2];
      if (j.contains("pixel_mean")) m.pixel_mean = j.at("pixel_mean").get<std::array<double, 3>>();
      if (j.contains("pixel_std")) m.pixel_std = j.at("pixel_std").get<std::array<double, 3>>();
    } catch (const nlohmann::json::exception& e) {
      throw BackendError(path.string() + ": " + e.what());
    }
    if (m.input_side < 1 || m.channels < 1 || m.height < 1 || m.width < 1)
      throw BackendError(path.string() + ": dimensions must be positive");
    return m;
  }
};

struct ModelPaths {
  std::filesystem::path encoder;
  std::filesystem::path decoder;
  std::filesystem::path metadata;

  /// encoder.onnx, decoder.onnx and metadata.json inside `dir`.
  static ModelPaths in_dir(const std::filesystem::path& dir) {
    return {dir / "encoder.onnx", dir / "decoder.onnx", dir / "metadata.json"};
  }
};

/// Model directory from an explicit override, else MATSEG_MODEL_DIR.
inline std::optional<std::filesystem::path> default_model_dir(const std::string& override_dir = {}) {
  if (!override_dir.empty()) return std::filesystem::path(override_dir);
  if (const char* env = std::getenv("MATSEG_MODEL_DIR"); env && *env)
    return std::filesystem::path(env);
  return std::nullopt;
}

namespace detail {

inline const char* kDecoderInputs[] = {"image_embeddings", "point_coords", "point_labels",
                                       "mask_input",       "has_mask_input", "orig_im_size"};

inline void check_encoder(const onnx::GraphSignature& sig, const ModelMetadata& meta,
                          const std::string& path) {
  auto fail = [&](const std::string& why) {
    throw BackendError("encoder signature mismatch in " + path + ": " + why);
  };
  if (sig.inputs.size() != 1) fail("expected exactly one input");
  const auto& in = sig.inputs[0].dims;
  if (in.size() != 4) fail("input must be 1x3xSxS");
  if ((in[1] && *in[1] != 3) || (in[2] && *in[2] != meta.input_side) ||
      (in[3] && *in[3] != meta.input_side))
    fail("input shape does not match 3x" + std::to_string(meta.input_side) + "x" +
         std::to_string(meta.input_side));
  if (sig.outputs.empty() || sig.outputs[0].dims.size() != 4) fail("output must be 1xCxHxW");
  const auto& out = sig.outputs[0].dims;
  if ((out[1] && *out[1] != meta.channels) || (out[2] && *out[2] != meta.height) ||
      (out[3] && *out[3] != meta.width))
    fail("output shape does not match metadata embedding dims");
}

inline void check_decoder(const onnx::GraphSignature& sig, const std::string& path) {
  for (const char* name : kDecoderInputs)
    if (!sig.input(name))
      throw BackendError("decoder signature mismatch in " + path + ": missing input " + name);
  for (const char* name : {"iou_predictions", "low_res_masks"})
    if (!sig.output(name))
      throw BackendError("decoder signature mismatch in " + path + ": missing output " + name);
}

inline cv::Mat blob(const std::vector<int>& shape, const std::vector<float>& values) {
  cv::Mat m(static_cast<int>(shape.size()), shape.data(), CV_32F);
  std::copy(values.begin(), values.end(), m.ptr<float>());
  return m;
}

}  // namespace detail

/// Preprocessing: resize the longest side to S (bilinear), normalise with the
/// model's mean/std, zero-pad bottom/right to S x S. Mask logits are upsampled to
/// S x S, cropped to the resized image, resized to the source frame and
/// thresholded at 0.
class NeuralBackend final : public Backend {
 public:
  NeuralBackend(ModelPaths paths, std::string device_hint = "cpu")
      : paths_(std::move(paths)), device_(std::move(device_hint)) {
    for (const auto& p : {paths_.encoder, paths_.decoder, paths_.metadata})
      if (!std::filesystem::exists(p)) throw BackendError("model file not found: " + p.string());
    if (device_ != "cpu" && device_ != "auto")
      throw BackendError("unsupported device '" + device_ + "' (cpu or auto)");
    meta_ = ModelMetadata::load(paths_.metadata);
    const auto enc = onnx::read_signature(paths_.encoder);
    const auto dec = onnx::read_signature(paths_.decoder);
    detail::check_encoder(enc, meta_, paths_.encoder.string());
    detail::check_decoder(dec, paths_.decoder.string());
    encoder_input_ = enc.inputs[0].name;
    encoder_output_ = enc.outputs[0].name;
    const auto& mi = dec.input("mask_input")->dims;
    mask_shape_ = {1, 1, 4 * meta_.height, 4 * meta_.width};
    if (mi.size() == 4 && mi[2] && mi[3])
      mask_shape_ = {1, 1, static_cast<int>(*mi[2]), static_cast<int>(*mi[3])};
    try {
      encoder_ = cv::dnn::readNetFromONNX(paths_.encoder.string());
      decoder_ = cv::dnn::readNetFromONNX(paths_.decoder.string());
      for (auto* net : {&encoder_, &decoder_}) {
        net->setPreferableBackend(cv::dnn::DNN_BACKEND_OPENCV);
        net->setPreferableTarget(cv::dnn::DNN_TARGET_CPU);
      }
    } catch (const cv::Exception& e) {
      throw BackendError(std::string("runtime initialisation failed: ") + e.what());
    }
  }

  using Backend::encode;

  const ModelMetadata& metadata() const { return meta_; }

  Capabilities capabilities() const override {
    return {"neural", meta_.input_side, meta_.channels, meta_.height, meta_.width};
  }

  ImageEmbedding encode(const Micrograph& img, const CropBox&) override {
    const int s = meta_.input_side, w = img.width(), h = img.height();
    const double scale = static_cast<double>(s) / std::max(w, h);
    const int nw = std::max(1, static_cast<int>(w * scale + 0.5));
    const int nh = std::max(1, static_cast<int>(h * scale + 0.5));

    cv::Mat src(h, w, img.channels() == 3 ? CV_8UC3 : CV_8UC1,
                const_cast<std::uint8_t*>(img.pixels().data()));
    cv::Mat rgb;
    if (img.channels() == 1)
      cv::cvtColor(src, rgb, cv::COLOR_GRAY2RGB);
    else
      rgb = src.clone();
    cv::Mat resized;
    cv::resize(rgb, resized, cv::Size(nw, nh), 0, 0, cv::INTER_LINEAR);

    std::vector<float> input(static_cast<std::size_t>(3) * s * s, 0.0f);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < nh; ++y)
        for (int x = 0; x < nw; ++x)
          input[(static_cast<std::size_t>(c) * s + y) * s + x] = static_cast<float>(
              (resized.at<cv::Vec3b>(y, x)[c] - meta_.pixel_mean[c]) / meta_.pixel_std[c]);

    cv::Mat out;
    try {
      encoder_.setInput(detail::blob({1, 3, s, s}, input), encoder_input_);
      out = encoder_.forward(encoder_output_);
    } catch (const cv::Exception& e) {
      throw BackendError(std::string("encoder failed: ") + e.what());
    }
    if (out.dims != 4 || out.size[1] != meta_.channels || out.size[2] != meta_.height ||
        out.size[3] != meta_.width)
      throw BackendError("encoder output does not match metadata embedding dims");

    ImageEmbedding e;
    e.channels = meta_.channels;
    e.height = meta_.height;
    e.width = meta_.width;
    e.values.assign(out.ptr<float>(), out.ptr<float>() + out.total());
    e.image_width = w;
    e.image_height = h;
    e.resize_scale = scale;
    return e;
  }

  PredictOutcome predict(const ImageEmbedding& emb, const PromptPoint& pt) override {
    detail::check_point(emb, pt);
    const float px = static_cast<float>(pt.x * emb.resize_scale);
    const float py = static_cast<float>(pt.y * emb.resize_scale);
    const std::size_t mask_len = static_cast<std::size_t>(mask_shape_[2]) * mask_shape_[3];

    std::vector<cv::Mat> outs;
    try {
      decoder_.setInput(detail::blob({1, emb.channels, emb.height, emb.width}, emb.values),
                        "image_embeddings");
      // positive point plus the padding point the exported decoder expects
      decoder_.setInput(detail::blob({1, 2, 2}, {px, py, 0.0f, 0.0f}), "point_coords");
      decoder_.setInput(detail::blob({1, 2}, {1.0f, -1.0f}), "point_labels");
      decoder_.setInput(detail::blob(mask_shape_, std::vector<float>(mask_len, 0.0f)), "mask_input");
      decoder_.setInput(detail::blob({1}, {0.0f}), "has_mask_input");
      decoder_.setInput(detail::blob({2}, {static_cast<float>(emb.image_height),
                                           static_cast<float>(emb.image_width)}),
                        "orig_im_size");
      decoder_.forward(outs, std::vector<cv::String>{"iou_predictions", "low_res_masks"});
    } catch (const cv::Exception& e) {
      throw BackendError(std::string("decoder failed: ") + e.what());
    }
    const cv::Mat& scores = outs[0];
    const cv::Mat& logits = outs[1];
    if (logits.dims != 4) throw BackendError("decoder low_res_masks must be 1xKxHxW");
    const int k = logits.size[1], lh = logits.size[2], lw = logits.size[3];
    if (static_cast<int>(scores.total()) != k)
      throw BackendError("decoder score count does not match mask count");

    const int s = meta_.input_side;
    const int nw = std::max(1, static_cast<int>(emb.image_width * emb.resize_scale + 0.5));
    const int nh = std::max(1, static_cast<int>(emb.image_height * emb.resize_scale + 0.5));
    PredictOutcome outcome;
    for (int c = 0; c < k; ++c) {
      cv::Mat low(lh, lw, CV_32F, const_cast<float*>(logits.ptr<float>()) +
                                      static_cast<std::size_t>(c) * lh * lw);
      cv::Mat model, full;
      cv::resize(low, model, cv::Size(s, s), 0, 0, cv::INTER_LINEAR);
      cv::resize(model(cv::Rect(0, 0, std::min(nw, s), std::min(nh, s))), full,
                 cv::Size(emb.image_width, emb.image_height), 0, 0, cv::INTER_LINEAR);
      BinaryMask m(emb.image_width, emb.image_height);
      for (int y = 0; y < full.rows; ++y) {
        const float* row = full.ptr<float>(y);
        for (int x = 0; x < full.cols; ++x)
          if (row[x] > 0.0f) m.set(x, y);
      }
      const double score = std::clamp(static_cast<double>(scores.ptr<float>()[c]), 0.0, 1.0);
      outcome.candidates.push_back({std::move(m), score, MaskOrigin{0, pt}});
    }
    std::stable_sort(outcome.candidates.begin(), outcome.candidates.end(),
                     [](const ScoredMask& a, const ScoredMask& b) { return a.score > b.score; });
    return outcome;
  }

  std::unique_ptr<Backend> clone() const override {
    return std::make_unique<NeuralBackend>(paths_, device_);
  }

 private:
  ModelPaths paths_;
  std::string device_;
  ModelMetadata meta_;
  std::string encoder_input_, encoder_output_;
  std::vector<int> mask_shape_;
  cv::dnn::Net encoder_, decoder_;
};

inline std::unique_ptr<Backend> load_neural_backend(const ModelPaths& paths,
                                                    const std::string& device_hint = "cpu") {
  return std::make_unique<NeuralBackend>(paths, device_hint);
}

}  // namespace matseg
