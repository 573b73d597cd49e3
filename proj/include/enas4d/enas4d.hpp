#pragma once

#include "enas4d/data.hpp"
#include "enas4d/dyninfer.hpp"
#include "enas4d/errors.hpp"
#include "enas4d/evaldb.hpp"
#include "enas4d/evo.hpp"
#include "enas4d/ms_ops.hpp"
#include "enas4d/pipeline.hpp"
#include "enas4d/predictor.hpp"
#include "enas4d/search_space.hpp"
#include "enas4d/serialize.hpp"
#include "enas4d/supernet.hpp"
#include "enas4d/trainer.hpp"
