"""EarCAN Test Suite"""
