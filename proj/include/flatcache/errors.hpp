#ifndef FLATCACHE_ERRORS_HPP
#define FLATCACHE_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace flatcache {

// Mistakes in the user's input: bad recipes, missing files, unknown images.
// The CLI maps these to exit code 1.
class UserError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Everything else: git failures, corrupt storage, internal contract
// violations. The CLI maps these to exit code 2.
class InternalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace flatcache

#endif
