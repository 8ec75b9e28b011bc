#pragma once

#include "nfat/casework.hpp"
#include "nfat/evaluation.hpp"
#include "nfat/ingest.hpp"
#include "nfat/synth.hpp"
