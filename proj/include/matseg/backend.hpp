#pragma once

// Promptable segmentation seam: encode an image once, then ask for candidate
// masks one point at a time.

#include <algorithm>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "matseg/image.hpp"

namespace matseg {

/// Model or runtime failure inside a backend.
class BackendError : public Error {
 public:
  using Error::Error;
};

struct ImageEmbedding {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> values;  // C*H*W, row-major per channel

  int image_width = 0;   // frame the returned masks live in
  int image_height = 0;
  double resize_scale = 1.0;  // image -> model frame

  std::optional<LabelMap> truth;  // oracle embeddings carry their label window
};

struct PredictOutcome {
  std::vector<ScoredMask> candidates;  // 1..3, scores non-increasing
};

struct Capabilities {
  std::string name;
  int max_input_side = 0;  // 0 = unbounded
  int channels = 0;
  int height = 0;
  int width = 0;
};

class Backend {
 public:
  virtual ~Backend() = default;

  virtual Capabilities capabilities() const = 0;

  /// `img` is the pixels of `window`, a rectangle of the full micrograph.
  virtual ImageEmbedding encode(const Micrograph& img, const CropBox& window) = 0;

  /// Masks come back in the embedded image's frame, sorted by descending score.
  virtual PredictOutcome predict(const ImageEmbedding& emb, const PromptPoint& pt) = 0;

  /// Independent handle for another worker.
  virtual std::unique_ptr<Backend> clone() const = 0;

  ImageEmbedding encode(const Micrograph& img) {
    return encode(img, CropBox::full(img.width(), img.height()));
  }
};

namespace detail {
inline void check_point(const ImageEmbedding& emb, const PromptPoint& pt) {
  if (pt.x < 0 || pt.y < 0 || pt.x >= emb.image_width || pt.y >= emb.image_height)
    throw std::out_of_range("predict: point (" + std::to_string(pt.x) + "," +
                            std::to_string(pt.y) + ") outside the embedded frame");
}
}  // namespace detail

/// Answers every prompt with the truth region containing it (score 1) or an
/// empty mask (score 0) on background.
class OracleBackend final : public Backend {
 public:
  explicit OracleBackend(LabelMap truth)
      : truth_(std::make_shared<const LabelMap>(std::move(truth))) {}

  using Backend::encode;

  Capabilities capabilities() const override {
    return {"oracle", 0, 1, truth_->height(), truth_->width()};
  }

  ImageEmbedding encode(const Micrograph& img, const CropBox& window) override {
    if (window.x0 < 0 || window.y0 < 0 || window.x1 > truth_->width() ||
        window.y1 > truth_->height() || window.empty())
      throw BackendError("oracle: window outside the truth frame");
    if (img.width() != window.width() || img.height() != window.height())
      throw BackendError("oracle: image does not match its window");
    LabelMap sub(window.width(), window.height());
    for (int y = 0; y < window.height(); ++y)
      for (int x = 0; x < window.width(); ++x) sub.at(x, y) = truth_->at(x + window.x0, y + window.y0);
    ImageEmbedding e;
    e.channels = 1;
    e.height = sub.height();
    e.width = sub.width();
    e.image_width = sub.width();
    e.image_height = sub.height();
    e.truth = std::move(sub);
    return e;
  }

  PredictOutcome predict(const ImageEmbedding& emb, const PromptPoint& pt) override {
    if (!emb.truth) throw BackendError("oracle: embedding was not produced by an oracle");
    detail::check_point(emb, pt);
    const LabelMap& lm = *emb.truth;
    const auto l = lm.at(pt.x, pt.y);
    BinaryMask m(lm.width(), lm.height());
    if (l)
      for (std::size_t i = 0; i < lm.size(); ++i)
        if (lm[i] == l) m.set(i);
    return {{ScoredMask{std::move(m), l ? 1.0 : 0.0, MaskOrigin{0, pt}}}};
  }

  std::unique_ptr<Backend> clone() const override {
    return std::make_unique<OracleBackend>(*this);
  }

 private:
  std::shared_ptr<const LabelMap> truth_;
};

inline std::unique_ptr<Backend> make_oracle_backend(LabelMap truth) {
  return std::make_unique<OracleBackend>(std::move(truth));
}

}  // namespace matseg
