#pragma once

#include "elpv/dataset.hpp"
#include "elpv/detect.hpp"
#include "elpv/error.hpp"
#include "elpv/folds.hpp"
#include "elpv/image.hpp"
#include "elpv/io.hpp"
#include "elpv/manifest.hpp"
#include "elpv/metrics.hpp"
#include "elpv/parallel.hpp"
#include "elpv/pipeline.hpp"
#include "elpv/power.hpp"
#include "elpv/qp_oracle.hpp"
#include "elpv/rectify.hpp"
#include "elpv/regress.hpp"
#include "elpv/search.hpp"
#include "elpv/synth.hpp"
#include "elpv/tuning.hpp"
