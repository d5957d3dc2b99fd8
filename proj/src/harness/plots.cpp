#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "acia/harness.hpp"

namespace acia::harness {

namespace {

const char* kClassColors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                              "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
const char* kDomainStrokes[] = {"#000000", "#555555", "#aaaaaa", "#dddddd", "#333333", "#888888"};

struct Csv {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

Csv read_csv(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw HarnessError("io", "cannot read " + p.string());
  Csv c;
  std::string line;
  auto split = [](const std::string& l) {
    std::vector<std::string> out;
    std::stringstream ss(l);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
  };
  if (std::getline(in, line)) c.header = split(line);
  while (std::getline(in, line)) {
    if (!line.empty()) c.rows.push_back(split(line));
  }
  return c;
}

std::string fmt(double v, int prec = 3) {
  std::ostringstream o;
  o.setf(std::ios::fixed);
  o.precision(prec);
  o << v;
  return o.str();
}

// Greyscale-to-blue ramp for a value in [0,1].
std::string ramp(double v) {
  v = std::clamp(v, 0.0, 1.0);
  const int r = static_cast<int>(std::lround(247 - 239 * v));
  const int g = static_cast<int>(std::lround(251 - 203 * v));
  const int b = static_cast<int>(std::lround(255 - 148 * v));
  char buf[8];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", r, g, b);
  return buf;
}

// Scatter of instances.csv into the box [x0,x0+w]x[y0,y0+h].
void scatter(std::ostream& svg, const Csv& c, double x0, double y0, double w, double h) {
  double minx = INFINITY, maxx = -INFINITY, miny = INFINITY, maxy = -INFINITY;
  for (const auto& r : c.rows) {
    const double x = std::stod(r.at(0)), y = std::stod(r.at(1));
    minx = std::min(minx, x);
    maxx = std::max(maxx, x);
    miny = std::min(miny, y);
    maxy = std::max(maxy, y);
  }
  const double sx = maxx > minx ? (w - 20) / (maxx - minx) : 1.0;
  const double sy = maxy > miny ? (h - 20) / (maxy - miny) : 1.0;
  svg << "<rect x=\"" << x0 << "\" y=\"" << y0 << "\" width=\"" << w << "\" height=\"" << h
      << "\" fill=\"none\" stroke=\"#cccccc\"/>\n";
  for (const auto& r : c.rows) {
    const double x = x0 + 10 + (std::stod(r.at(0)) - minx) * sx;
    const double y = y0 + h - 10 - (std::stod(r.at(1)) - miny) * sy;
    const int cls = std::stoi(r.at(2)), dom = std::stoi(r.at(3));
    svg << "<circle class=\"pt\" cx=\"" << fmt(x, 2) << "\" cy=\"" << fmt(y, 2) << "\" r=\"3\" fill=\""
        << kClassColors[cls % 10] << "\" stroke=\"" << kDomainStrokes[dom % 6] << "\" data-class=\"" << cls
        << "\" data-domain=\"" << dom << "\"/>\n";
  }
}

}  // namespace

std::vector<std::array<double, 2>> pca_project(const std::vector<std::vector<double>>& features) {
  const int n = static_cast<int>(features.size());
  std::vector<std::array<double, 2>> out(static_cast<std::size_t>(n), {0.0, 0.0});
  if (n == 0) return out;
  const int f = static_cast<int>(features.front().size());
  Eigen::MatrixXd x(n, f);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < f; ++j) x(i, j) = features[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  }
  Eigen::VectorXd mu = Eigen::VectorXd::Zero(f);
  for (int i = 0; i < n; ++i) mu += x.row(i).transpose();
  mu /= n;
  for (int i = 0; i < n; ++i) x.row(i) -= mu.transpose();
  const Eigen::MatrixXd cov = x.transpose() * x / std::max(1, n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  const int dims = std::min(2, f);
  for (int d = 0; d < dims; ++d) {
    Eigen::VectorXd v = es.eigenvectors().col(f - 1 - d);
    // sign convention: largest-magnitude component positive
    int arg = 0;
    for (int j = 1; j < f; ++j) {
      if (std::abs(v(j)) > std::abs(v(arg))) arg = j;
    }
    if (v(arg) < 0) v = -v;
    const Eigen::VectorXd p = x * v;
    for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)][static_cast<std::size_t>(d)] = p(i);
  }
  return out;
}

std::vector<std::filesystem::path> report_plots(const std::filesystem::path& run_dir) {
  std::vector<std::filesystem::path> written;
  if (std::filesystem::exists(run_dir / "heatmap.csv")) {
    const Csv c = read_csv(run_dir / "heatmap.csv");
    const int k = static_cast<int>(c.rows.size());
    const int cell = 48, left = 90, top = 40;
    const auto path = run_dir / "heatmap.svg";
    std::ofstream svg(path);
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << left + k * cell + 20 << "\" height=\""
        << top + k * cell + 30 << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    svg << "<text x=\"" << left << "\" y=\"16\">class embedding activation (row: crop class)</text>\n";
    for (int j = 0; j < k; ++j) {
      svg << "<text x=\"" << left + j * cell + cell / 2 << "\" y=\"" << top - 6 << "\" text-anchor=\"middle\">"
          << c.header.at(static_cast<std::size_t>(j) + 1) << "</text>\n";
    }
    for (int i = 0; i < k; ++i) {
      const auto& row = c.rows[static_cast<std::size_t>(i)];
      svg << "<text x=\"" << left - 6 << "\" y=\"" << top + i * cell + cell / 2 + 4 << "\" text-anchor=\"end\">" << row.at(0)
          << "</text>\n";
      for (int j = 0; j < k; ++j) {
        const double v = std::stod(row.at(static_cast<std::size_t>(j) + 1));
        svg << "<rect class=\"cell\" x=\"" << left + j * cell << "\" y=\"" << top + i * cell << "\" width=\"" << cell
            << "\" height=\"" << cell << "\" fill=\"" << ramp(v) << "\" data-row=\"" << i << "\" data-col=\"" << j
            << "\" data-value=\"" << row.at(static_cast<std::size_t>(j) + 1) << "\"/>\n";
        svg << "<text x=\"" << left + j * cell + cell / 2 << "\" y=\"" << top + i * cell + cell / 2 + 4
            << "\" text-anchor=\"middle\" fill=\"" << (v > 0.6 ? "#ffffff" : "#000000") << "\">" << fmt(v, 2) << "</text>\n";
      }
    }
    svg << "</svg>\n";
    written.push_back(path);
  }
  if (std::filesystem::exists(run_dir / "instances.csv")) {
    const Csv c = read_csv(run_dir / "instances.csv");
    const auto path = run_dir / "projection.svg";
    std::ofstream svg(path);
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"440\" height=\"460\" font-family=\"sans-serif\" font-size=\"11\">\n";
    svg << "<text x=\"20\" y=\"16\">PCA of pooled instance features (fill: class, outline: domain)</text>\n";
    scatter(svg, c, 20, 30, 400, 400);
    svg << "</svg>\n";
    written.push_back(path);
  }
  return written;
}

std::filesystem::path comparison_plot(const std::filesystem::path& a, const std::filesystem::path& b,
                                      const std::filesystem::path& out_svg, const std::string& label_a,
                                      const std::string& label_b) {
  const Csv ca = read_csv(a / "instances.csv");
  const Csv cb = read_csv(b / "instances.csv");
  if (out_svg.has_parent_path()) std::filesystem::create_directories(out_svg.parent_path());
  std::ofstream svg(out_svg);
  if (!svg) throw HarnessError("io", "cannot write " + out_svg.string());
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"860\" height=\"460\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg << "<text x=\"20\" y=\"18\">" << label_a << "</text>\n";
  svg << "<text x=\"440\" y=\"18\">" << label_b << "</text>\n";
  scatter(svg, ca, 20, 30, 400, 400);
  scatter(svg, cb, 440, 30, 400, 400);
  svg << "</svg>\n";
  return out_svg;
}

}  // namespace acia::harness
