#pragma once

#include "birqa/anchorloss.hpp"
#include "birqa/attacks.hpp"
#include "birqa/common.hpp"
#include "birqa/datakit.hpp"
#include "birqa/diff.hpp"
#include "birqa/evalstats.hpp"
#include "birqa/feature_graph.hpp"
#include "birqa/features.hpp"
#include "birqa/imgcore.hpp"
#include "birqa/network.hpp"
#include "birqa/training.hpp"
