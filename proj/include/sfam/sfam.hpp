#pragma once

#include "sfam/calibrate.hpp"
#include "sfam/ctk.hpp"
#include "sfam/encode.hpp"
#include "sfam/error.hpp"
#include "sfam/features.hpp"
#include "sfam/fuse.hpp"
#include "sfam/image.hpp"
#include "sfam/pdflow.hpp"
#include "sfam/pipeline.hpp"
#include "sfam/png_io.hpp"
#include "sfam/rankpool.hpp"
#include "sfam/rgbd.hpp"
#include "sfam/synth.hpp"
