#include "acia/box.hpp"

#include <algorithm>
#include <numeric>

namespace acia {

double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

Box clip_box(const Box& b, double w, double h) {
  Box c = b;
  c.x1 = std::clamp(b.x1, 0.0, w);
  c.x2 = std::clamp(b.x2, 0.0, w);
  c.y1 = std::clamp(b.y1, 0.0, h);
  c.y2 = std::clamp(b.y2, 0.0, h);
  return c;
}

std::vector<int> nms_sorted(std::span<const Box> boxes, double iou_thresh) {
  std::vector<int> keep;
  std::vector<bool> suppressed(boxes.size(), false);
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    if (suppressed[i]) continue;
    keep.push_back(static_cast<int>(i));
    for (std::size_t j = i + 1; j < boxes.size(); ++j) {
      if (!suppressed[j] && iou(boxes[i], boxes[j]) > iou_thresh) suppressed[j] = true;
    }
  }
  return keep;
}

std::vector<int> argsort_desc(std::span<const double> scores) {
  std::vector<int> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return scores[a] > scores[b]; });
  return idx;
}

}  // namespace acia
