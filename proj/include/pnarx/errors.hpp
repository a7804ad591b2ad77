#pragma once

#include <stdexcept>
#include <string>

namespace pnarx {

//! Base class for all errors raised by this library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

//! Khatri-Rao / CPD factor column counts disagree.
class ColumnMismatch : public Error {
public:
    using Error::Error;
};

//! Vector/matrix dimension does not match the expected one.
class DimensionMismatch : public Error {
public:
    using Error::Error;
};

//! Signal is too short for the requested lag structure.
class TooShort : public Error {
public:
    using Error::Error;
};

//! Least-squares problem does not have full column rank.
class RankDeficient : public Error {
public:
    using Error::Error;
};

//! Relative error metric undefined because the reference signal is zero.
class ZeroReference : public Error {
public:
    using Error::Error;
};

//! Free-run simulation exceeded the divergence bound.
class Diverged : public Error {
public:
    using Error::Error;
};

//! Multisine harmonic index outside the representable band.
class BinOutOfRange : public Error {
public:
    using Error::Error;
};

//! ODE state became non-finite during integration.
class NonFinite : public Error {
public:
    using Error::Error;
};

//! Cannot scale noise against an identically-zero signal.
class ZeroSignal : public Error {
public:
    using Error::Error;
};

//! CSV parse failure; message names the offending line.
class ParseError : public Error {
public:
    using Error::Error;
};

//! Projected operating points collapse onto too few distinct values.
class DegenerateGrid : public Error {
public:
    using Error::Error;
};

} // namespace pnarx
