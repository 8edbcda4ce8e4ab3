#pragma once

#include <stdexcept>
#include <string>

namespace urbanst {

// Every failure carries a stable category name so the command-line front end
// can print a single machine-parsable line.
class Error : public std::runtime_error {
public:
    Error(std::string category, const std::string& what)
        : std::runtime_error(what), category_(std::move(category)) {}

    const std::string& category() const noexcept { return category_; }

private:
    std::string category_;
};

#define URBANST_DEFINE_ERROR(Name)                                             \
    class Name : public Error {                                                \
    public:                                                                    \
        explicit Name(const std::string& what) : Error(#Name, what) {}         \
    }

URBANST_DEFINE_ERROR(FormatError);
URBANST_DEFINE_ERROR(DataError);
URBANST_DEFINE_ERROR(ResampleError);
URBANST_DEFINE_ERROR(EmptyDatasetError);
URBANST_DEFINE_ERROR(CoordError);
URBANST_DEFINE_ERROR(DegenerateGraphError);
URBANST_DEFINE_ERROR(WindowError);
URBANST_DEFINE_ERROR(ShapeError);
URBANST_DEFINE_ERROR(AttentionMaskError);
URBANST_DEFINE_ERROR(ConfigError);
URBANST_DEFINE_ERROR(RevinError);
URBANST_DEFINE_ERROR(SplitError);
URBANST_DEFINE_ERROR(DivergenceError);
URBANST_DEFINE_ERROR(EvalError);
URBANST_DEFINE_ERROR(ImputeError);
URBANST_DEFINE_ERROR(IoError);

#undef URBANST_DEFINE_ERROR

} // namespace urbanst
