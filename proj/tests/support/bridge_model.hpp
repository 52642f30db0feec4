#pragma once

// Model served by the test responder; tests build the same one in-core.

#include "vcc/toylab.hpp"

namespace bridgefix {

inline vcc::LayeredModel responder_model() {
  vcc::LayeredModel m = vcc::toy_architecture(4);
  vcc::init_weights(m, 0xB41D);
  return m;
}

}  // namespace bridgefix
