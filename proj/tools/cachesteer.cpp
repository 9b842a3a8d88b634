#include "cachesteer/cli.hpp"

#include <cstdlib>

int main(int argc, char** argv) {
  const char* fixtures = std::getenv("CACHESTEER_FIXTURES_DIR");
  return cachesteer::cli::run(argc, argv, std::cout, std::cerr, fixtures ? fixtures : CACHESTEER_FIXTURES);
}
