#pragma once

#include <stdexcept>
#include <string>

namespace lrsa {

/// Coarse classification used by the C API to pick a status code.
enum class ErrorKind {
  usage,
  dimension,
  contract,
  domain,
  lookup,
  io,
  load,
  resource,
  convergence,
  solver,
  training,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

template <ErrorKind K>
class KindedError : public Error {
 public:
  explicit KindedError(const std::string& what) : Error(K, what) {}
};

using UsageError = KindedError<ErrorKind::usage>;
using DimensionError = KindedError<ErrorKind::dimension>;
using ContractError = KindedError<ErrorKind::contract>;
using DomainError = KindedError<ErrorKind::domain>;
using LookupError = KindedError<ErrorKind::lookup>;
using IoError = KindedError<ErrorKind::io>;
using LoadError = KindedError<ErrorKind::load>;
using ResourceError = KindedError<ErrorKind::resource>;
using ConvergenceError = KindedError<ErrorKind::convergence>;
using SolverError = KindedError<ErrorKind::solver>;
using TrainingError = KindedError<ErrorKind::training>;

}  // namespace lrsa
