#pragma once

#include "geomark/error.hpp"
#include "geomark/vecmath.hpp"
#include "geomark/embedding_set.hpp"
#include "geomark/format.hpp"
#include "geomark/watermark.hpp"
#include "geomark/verification.hpp"
#include "geomark/extraction.hpp"
#include "geomark/attacks.hpp"
#include "geomark/datastore.hpp"
#include "geomark/experiment.hpp"
#include "geomark/service.hpp"
