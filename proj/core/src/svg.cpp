#include "xflow/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <set>

#include "xflow/errors.hpp"

namespace xflow {

namespace {

constexpr int kUnitW = 12;
constexpr int kUnitH = 24;
constexpr int kPairCell = 6;
constexpr std::size_t kUnitsPerRow = 64;
constexpr int kMargin = 4;

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string cell_label(const ExplanationReport& r, const UnitSequence* seq, std::size_t i) {
  char buf[96];
  if (r.spec.index_mode == IndexMode::Value) {
    std::snprintf(buf, sizeof buf, i == static_cast<std::size_t>(kPadToken) ? "pad" : "0x%02zx", i);
    return buf;
  }
  if (seq && i < seq->size()) {
    if (seq->kind == UnitKind::Bytes) {
      std::snprintf(buf, sizeof buf, "pos %zu (0x%02x)", i, seq->token(i) & 0xff);
    } else {
      std::snprintf(buf, sizeof buf, "hop %zu (%.3f ms)", i + 1, seq->units[i]);
    }
    return buf;
  }
  std::snprintf(buf, sizeof buf, "pos %zu", i);
  return buf;
}

}  // namespace

std::string report_svg(const ExplanationReport& r, const UnitSequence* seq) {
  if (r.shape.empty()) throw ValidationError("report '" + r.id + "' has no shape");
  const std::size_t side = r.shape[0];
  const bool pairs = r.spec.level == MaskLevel::Interaction;
  const std::size_t n = r.spec.index_mode == IndexMode::Value
                            ? side
                            : std::max<std::size_t>(1, std::min(r.effective_len, side));

  double lo = 0, hi = 0;
  bool first = true;
  for (std::size_t a = 0; a < (pairs ? n : 1); ++a) {
    for (std::size_t b = 0; b < n; ++b) {
      const double v = r.scores.at(pairs ? a * side + b : b);
      if (v == std::numeric_limits<double>::lowest()) continue;
      lo = first ? v : std::min(lo, v);
      hi = first ? v : std::max(hi, v);
      first = false;
    }
  }
  const auto shade = [&](double v) {
    const double t = (hi > lo && v != std::numeric_limits<double>::lowest()) ? (v - lo) / (hi - lo) : 0.0;
    return 255 - static_cast<int>(std::lround(255.0 * std::clamp(t, 0.0, 1.0)));
  };
  const std::set<std::size_t> top(r.topk.begin(), r.topk.end());

  int width = 0, height = 0;
  if (pairs) {
    width = height = static_cast<int>(n) * kPairCell + 2 * kMargin;
  } else {
    const std::size_t cols = std::min(n, kUnitsPerRow);
    const std::size_t rows = (n + kUnitsPerRow - 1) / kUnitsPerRow;
    width = static_cast<int>(cols) * kUnitW + 2 * kMargin;
    height = static_cast<int>(rows) * kUnitH + 2 * kMargin;
  }

  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" height=\"%d\" viewBox=\"0 0 %d %d\">\n", width,
                height, width, height);
  out += buf;
  out += "<title>" + xml_escape(r.id) + " (" + to_string(r.method) + ", " + to_string(r.spec.level) + "/" +
         to_string(r.spec.index_mode) + ")</title>\n";
  const auto rect = [&](int x, int y, int w, int h, double v, bool outlined, const std::string& label) {
    const int g = shade(v);
    const double shown = v == std::numeric_limits<double>::lowest() ? 0.0 : v;
    std::snprintf(buf, sizeof buf, "<rect x=\"%d\" y=\"%d\" width=\"%d\" height=\"%d\" fill=\"rgb(%d,%d,%d)\"", x, y, w,
                  h, g, g, g);
    out += buf;
    out += outlined ? " stroke=\"#d62728\" stroke-width=\"2\"" : " stroke=\"#cccccc\" stroke-width=\"0.5\"";
    std::snprintf(buf, sizeof buf, "><title>%s: %.6f</title></rect>\n", label.c_str(), shown);
    out += buf;
  };
  if (pairs) {
    for (std::size_t a = 0; a < n; ++a) {
      for (std::size_t b = 0; b < n; ++b) {
        const std::size_t idx = a * side + b;
        rect(kMargin + static_cast<int>(b) * kPairCell, kMargin + static_cast<int>(a) * kPairCell, kPairCell,
             kPairCell, r.scores[idx], top.count(idx) > 0, cell_label(r, seq, a) + " -> " + cell_label(r, seq, b));
      }
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      rect(kMargin + static_cast<int>(i % kUnitsPerRow) * kUnitW, kMargin + static_cast<int>(i / kUnitsPerRow) * kUnitH,
           kUnitW, kUnitH, r.scores[i], top.count(i) > 0, cell_label(r, seq, i));
    }
  }
  out += "</svg>\n";
  return out;
}

}  // namespace xflow
