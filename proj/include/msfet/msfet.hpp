#pragma once

#include "msfet/error.hpp"
#include "msfet/tensor.hpp"
#include "msfet/ops.hpp"
#include "msfet/gradcheck.hpp"
#include "msfet/parameters.hpp"
#include "msfet/optim.hpp"
#include "msfet/serialize.hpp"
#include "msfet/event_core.hpp"
#include "msfet/wavelet.hpp"
#include "msfet/model.hpp"
#include "msfet/metrics.hpp"
#include "msfet/losses.hpp"
#include "msfet/synth.hpp"
#include "msfet/train.hpp"
#include "msfet/run_config.hpp"
