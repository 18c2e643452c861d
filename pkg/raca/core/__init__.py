# Core learning and simulation package
