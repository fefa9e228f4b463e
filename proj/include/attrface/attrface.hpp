#pragma once

#include "attrface/binary_io.hpp"
#include "attrface/errors.hpp"
#include "attrface/eval.hpp"
#include "attrface/gradcheck.hpp"
#include "attrface/groups.hpp"
#include "attrface/losses.hpp"
#include "attrface/model.hpp"
#include "attrface/pairs.hpp"
#include "attrface/report.hpp"
#include "attrface/rng.hpp"
#include "attrface/synth.hpp"
#include "attrface/tensor.hpp"
#include "attrface/trainer.hpp"
