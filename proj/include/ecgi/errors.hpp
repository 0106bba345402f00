#ifndef ECGI_ERRORS_HPP
#define ECGI_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace ecgi {

// Base class for all library errors.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

#define ECGI_DEFINE_ERROR(Name)                                   \
    struct Name : Error {                                         \
        explicit Name(const std::string& msg) : Error(msg) {}     \
    }

ECGI_DEFINE_ERROR(GeometryOverlap);
ECGI_DEFINE_ERROR(MeshQuality);
ECGI_DEFINE_ERROR(TopologyError);
ECGI_DEFINE_ERROR(InsufficientResolution);
ECGI_DEFINE_ERROR(EllipticityError);
ECGI_DEFINE_ERROR(SingularSystem);
ECGI_DEFINE_ERROR(SolveFailure);
ECGI_DEFINE_ERROR(ShapeMismatch);
ECGI_DEFINE_ERROR(CGDivergence);
ECGI_DEFINE_ERROR(ZeroIterate);
ECGI_DEFINE_ERROR(NonFiniteObjective);
ECGI_DEFINE_ERROR(ParameterOutOfRange);
ECGI_DEFINE_ERROR(BlowUp);
ECGI_DEFINE_ERROR(MissingArtifacts);
ECGI_DEFINE_ERROR(IoError);
ECGI_DEFINE_ERROR(ConfigError);

#undef ECGI_DEFINE_ERROR

} // namespace ecgi

#endif
