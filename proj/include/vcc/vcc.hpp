#pragma once

#include "vcc/bridge_client.hpp"
#include "vcc/cluster.hpp"
#include "vcc/concepts.hpp"
#include "vcc/config.hpp"
#include "vcc/error.hpp"
#include "vcc/gradcheck.hpp"
#include "vcc/graph.hpp"
#include "vcc/image.hpp"
#include "vcc/io.hpp"
#include "vcc/itcav.hpp"
#include "vcc/netcore.hpp"
#include "vcc/oracle.hpp"
#include "vcc/pipeline.hpp"
#include "vcc/segment.hpp"
#include "vcc/stats.hpp"
#include "vcc/tensor.hpp"
#include "vcc/toylab.hpp"
