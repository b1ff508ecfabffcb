#pragma once

#include "dvmap/archetype.hpp"
#include "dvmap/benchmark.hpp"
#include "dvmap/codebook.hpp"
#include "dvmap/common.hpp"
#include "dvmap/csv.hpp"
#include "dvmap/forest.hpp"
#include "dvmap/grpo.hpp"
#include "dvmap/inference.hpp"
#include "dvmap/log.hpp"
#include "dvmap/metrics.hpp"
#include "dvmap/pipeline.hpp"
#include "dvmap/prediction.hpp"
#include "dvmap/profile.hpp"
#include "dvmap/prompt.hpp"
#include "dvmap/semdist.hpp"
#include "dvmap/survey.hpp"
