#include "cli.hpp"

int main(int argc, char** argv) {
  rigidflow::cli::tune_allocator();
  return rigidflow::cli::run(argc, argv);
}
