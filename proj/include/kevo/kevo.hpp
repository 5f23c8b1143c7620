#pragma once

#include "kevo/error.hpp"
#include "kevo/numerics.hpp"
#include "kevo/trace.hpp"
#include "kevo/engine.hpp"
#include "kevo/analysis.hpp"
#include "kevo/skip_plan.hpp"
#include "kevo/tsne.hpp"
#include "kevo/report.hpp"
#include "kevo/svg.hpp"
