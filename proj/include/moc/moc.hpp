#pragma once

#include "moc/apdu.hpp"
#include "moc/bits.hpp"
#include "moc/card.hpp"
#include "moc/eval.hpp"
#include "moc/pcaitq.hpp"
#include "moc/transport.hpp"
