#pragma once

#include "hyspec/ablation.hpp"
#include "hyspec/autograd.hpp"
#include "hyspec/checkpoint.hpp"
#include "hyspec/config.hpp"
#include "hyspec/corpus.hpp"
#include "hyspec/engine.hpp"
#include "hyspec/experiment.hpp"
#include "hyspec/metrics.hpp"
#include "hyspec/model.hpp"
#include "hyspec/numerics.hpp"
#include "hyspec/theory.hpp"
#include "hyspec/trainer.hpp"
#include "hyspec/weights.hpp"
