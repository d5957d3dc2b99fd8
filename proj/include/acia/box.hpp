#pragma once

#include <optional>
#include <span>
#include <vector>

namespace acia {

// Axis-aligned box in pixel coordinates, x1 < x2 and y1 < y2.
struct Box {
  double x1 = 0;
  double y1 = 0;
  double x2 = 0;
  double y2 = 0;
  int class_id = 0;
  std::optional<double> score;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() > 0 && height() > 0 ? width() * height() : 0.0; }
  double center_x() const { return 0.5 * (x1 + x2); }
  double center_y() const { return 0.5 * (y1 + y2); }
  bool valid() const { return x1 < x2 && y1 < y2; }
  bool inside(double w, double h) const { return x1 >= 0 && y1 >= 0 && x2 <= w && y2 <= h; }

  bool operator==(const Box&) const = default;
};

using BoxSet = std::vector<Box>;

// Intersection over union; 0 when either box is empty.
double iou(const Box& a, const Box& b);

Box clip_box(const Box& b, double w, double h);

// Greedy non-maximum suppression over boxes already sorted by descending
// score. Returns kept indices in input order.
std::vector<int> nms_sorted(std::span<const Box> boxes, double iou_thresh);

// Indices that sort scores descending; ties keep the lower index first.
std::vector<int> argsort_desc(std::span<const double> scores);

}  // namespace acia
