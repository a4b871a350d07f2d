#include "twopc/cli.hpp"

int main(int argc, char** argv) { return twopc::dispatch(argc, argv); }
