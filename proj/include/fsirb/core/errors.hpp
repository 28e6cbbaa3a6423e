#pragma once

#include <stdexcept>
#include <string>

namespace fsirb {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define FSIRB_ERROR(Name)                        \
    class Name : public Error {                  \
    public:                                      \
        explicit Name(const std::string& what)   \
            : Error(#Name ": " + what) {}        \
    };

FSIRB_ERROR(NonFiniteInput)
FSIRB_ERROR(DegenerateMatrix)
FSIRB_ERROR(InvalidSpec)
FSIRB_ERROR(MapLeftDomain)
FSIRB_ERROR(NonFiniteState)
FSIRB_ERROR(NewtonDiverged)
FSIRB_ERROR(SingularMetric)
FSIRB_ERROR(NonRigidTest)
FSIRB_ERROR(KernelUnderresolved)
FSIRB_ERROR(CFLViolation)
FSIRB_ERROR(MismatchedScenario)
FSIRB_ERROR(SolverDiverged)
FSIRB_ERROR(IoError)

#undef FSIRB_ERROR

class ContactError : public Error {
public:
    ContactError(double t, double distance)
        : Error("ContactError: body within contact tolerance at t=" + std::to_string(t) +
                " (gap " + std::to_string(distance) + ")"),
          time(t), gap(distance) {}
    double time;
    double gap;
};

class ParseError : public Error {
public:
    ParseError(const std::string& msg, std::size_t line_, std::size_t column_)
        : Error("ParseError at line " + std::to_string(line_) + ", column " +
                std::to_string(column_) + ": " + msg),
          line(line_), column(column_) {}
    std::size_t line;
    std::size_t column;
};

class ValidationError : public Error {
public:
    ValidationError(const std::string& invariant_, const std::string& msg)
        : Error("ValidationError [" + invariant_ + "]: " + msg), invariant(invariant_) {}
    std::string invariant;
};

}  // namespace fsirb
