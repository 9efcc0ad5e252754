#pragma once

#include <string>

#include "xflow/data_model.hpp"
#include "xflow/explainer.hpp"

namespace xflow {

/// Heatmap with one rectangle per unit (or unit pair): darker fill means
/// higher normalized importance, Top-K cells are outlined, and each cell
/// carries a title tooltip. `seq` (optional) adds unit values to tooltips.
std::string report_svg(const ExplanationReport& report, const UnitSequence* seq = nullptr);

}  // namespace xflow
