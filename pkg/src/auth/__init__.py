# Continuous-authentication session machine and CRI challenges
