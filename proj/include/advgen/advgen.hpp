#pragma once

#include "advgen/common.hpp"
#include "advgen/data.hpp"
#include "advgen/evaluation.hpp"
#include "advgen/generator.hpp"
#include "advgen/losses.hpp"
#include "advgen/surrogate.hpp"
#include "advgen/training.hpp"
#include "advgen/config.hpp"
